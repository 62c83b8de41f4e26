"""Synthetic HQ clips with exact ground-truth flow, and the two-stage
degradation curriculum.

Clips are analytic textures (mixed sinusoids plus Gaussian blobs) evaluated
on coordinate grids shifted by a constant per-frame translation, so the
ground-truth optical flow is known exactly and integer motion shifts are
bitwise-faithful.

Degradation follows the usual blur -> noise -> down/up resample ->
compression pipeline, run `order` times (order 2 emulates second-order
pipelines). Stage 1 applies one parameter set to every frame of a video;
stage 2 walks a Markov chain over frames: each frame keeps the previous
frame's parameters or, with probability p, perturbs them. The compression
step is an 8x8 block-DCT quantization of luma; no codec dependencies.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .grid import VideoClip
from .util import np_rng

BLUR_MAX = 3.0
NOISE_MAX = 0.2
DOWN_FACTORS = (1, 2, 4)
QUALITY_MIN, QUALITY_MAX = 10, 95
LOSSLESS_QUALITY = 95
MOTION_MAX = 3.0
DEFAULT_PERTURB_P = 0.3
JITTER = 0.25


@dataclass(frozen=True)
class DegradationParams:
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    down_factor: int = 1
    jpeg_quality: int = LOSSLESS_QUALITY
    order: int = 1

    def __post_init__(self):
        if not 0.0 <= self.blur_sigma <= BLUR_MAX:
            raise ValueError(f"blur_sigma outside [0,{BLUR_MAX}]: {self.blur_sigma}")
        if not 0.0 <= self.noise_sigma <= NOISE_MAX:
            raise ValueError(f"noise_sigma outside [0,{NOISE_MAX}]: {self.noise_sigma}")
        if self.down_factor not in DOWN_FACTORS:
            raise ValueError(f"down_factor must be one of {DOWN_FACTORS}: {self.down_factor}")
        if not QUALITY_MIN <= self.jpeg_quality <= QUALITY_MAX:
            raise ValueError(f"jpeg_quality outside [{QUALITY_MIN},{QUALITY_MAX}]")
        if self.order not in (1, 2):
            raise ValueError(f"order must be 1 or 2: {self.order}")

    @property
    def is_identity(self) -> bool:
        return (self.blur_sigma == 0.0 and self.noise_sigma == 0.0
                and self.down_factor == 1 and self.jpeg_quality >= LOSSLESS_QUALITY)


@dataclass
class DegradationTrace:
    frames: list[DegradationParams]
    stage: str                      # "S1" or "S2"
    seed: int
    p: float | None = None          # perturbation probability, S2 only

    def save(self, path) -> None:
        doc = {"stage": self.stage, "p": self.p, "seed": self.seed,
               "frames": [asdict(f) for f in self.frames]}
        with open(path, "w") as f:
            json.dump(doc, f, indent=1)

    @staticmethod
    def load(path) -> "DegradationTrace":
        with open(path) as f:
            doc = json.load(f)
        return DegradationTrace(frames=[DegradationParams(**rec) for rec in doc["frames"]],
                                stage=doc["stage"], seed=doc["seed"], p=doc["p"])


@dataclass
class FlowField:
    """Per adjacent frame pair, (T-1, 2, H, W) displacements, (dy, dx) order.

    backward[i] warps frame i to align with frame i+1; forward[i] warps
    frame i+1 to align with frame i.
    """

    backward: torch.Tensor
    forward: torch.Tensor

    def __post_init__(self):
        if self.backward.shape != self.forward.shape or self.backward.shape[1] != 2:
            raise ValueError("flow tensors must share a (T-1, 2, H, W) shape")
        if not (torch.isfinite(self.backward).all() and torch.isfinite(self.forward).all()):
            raise ValueError("flow contains non-finite values")


# ---------------------------------------------------------------------------
# synthetic clips


def gen_clip(kind: str, dims: tuple[int, int, int, int], motion: tuple[float, float],
             seed: int) -> tuple[VideoClip, FlowField]:
    """Textured clip translating by `motion` = (dx, dy) pixels per frame.

    The texture is evaluated analytically at shifted coordinates, so frame
    k+1 equals frame k displaced by exactly `motion` (bitwise for integer
    motion) and the returned flow is the exact constant translation.
    """
    if kind not in ("mixed", "sines", "blobs"):
        raise ValueError(f"unknown clip kind {kind!r}")
    c, t, h, w = dims
    dx, dy = float(motion[0]), float(motion[1])
    if abs(dx) > MOTION_MAX or abs(dy) > MOTION_MAX:
        raise ValueError(f"|motion| must be <= {MOTION_MAX} px/frame, got {motion}")
    rng = np_rng(seed, "clip", kind)

    n_sines, n_blobs = 4, 3
    sine_amp = rng.uniform(0.5, 1.0, size=(c, n_sines))
    sine_amp *= 0.34 / sine_amp.sum(axis=1, keepdims=True)
    sine_freq = rng.uniform(1.0 / 24.0, 1.0 / 5.0, size=(c, n_sines, 2))
    sine_dir = rng.uniform(0.0, 2 * np.pi, size=(c, n_sines))
    sine_phase = rng.uniform(0.0, 2 * np.pi, size=(c, n_sines))
    blob_pos = rng.uniform(0.0, 1.0, size=(n_blobs, 2)) * np.array([h, w])
    blob_rad = rng.uniform(0.12, 0.35, size=n_blobs) * min(h, w)
    blob_gain = rng.uniform(0.5, 1.0, size=(c, n_blobs)) * rng.choice([-1.0, 1.0], size=(c, n_blobs))
    blob_gain *= 0.13 / np.abs(blob_gain).sum(axis=1, keepdims=True)
    if kind == "sines":
        blob_gain[:] = 0.0
    elif kind == "blobs":
        sine_amp[:] = 0.0

    frames = np.empty((c, t, h, w), dtype=np.float64)
    base_y = np.arange(h, dtype=np.float64)[:, None]
    base_x = np.arange(w, dtype=np.float64)[None, :]
    for k in range(t):
        yy = base_y - k * dy
        xx = base_x - k * dx
        for ch in range(c):
            val = np.full((h, w), 0.5)
            for j in range(n_sines):
                fy = sine_freq[ch, j, 0] * math.sin(sine_dir[ch, j])
                fx = sine_freq[ch, j, 1] * math.cos(sine_dir[ch, j])
                val += sine_amp[ch, j] * np.sin(2 * np.pi * (fy * yy + fx * xx) + sine_phase[ch, j])
            for b in range(n_blobs):
                d2 = (yy - blob_pos[b, 0]) ** 2 + (xx - blob_pos[b, 1]) ** 2
                val += blob_gain[ch, b] * np.exp(-d2 / (2 * blob_rad[b] ** 2))
            frames[ch, k] = val
    clip = VideoClip(torch.from_numpy(frames.astype(np.float32)))

    shape = (max(t - 1, 0), 2, h, w)
    bw = torch.empty(shape)
    fw = torch.empty(shape)
    bw[:, 0], bw[:, 1] = -dy, -dx
    fw[:, 0], fw[:, 1] = dy, dx
    return clip, FlowField(backward=bw, forward=fw)


# ---------------------------------------------------------------------------
# single-frame pipeline


def _gaussian_kernel1d(sigma: float, dtype: torch.dtype) -> torch.Tensor:
    radius = max(1, math.ceil(3.0 * sigma))
    xs = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-(xs ** 2) / (2.0 * sigma * sigma))
    return (k / k.sum()).to(dtype)


def gaussian_blur(frame: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian with reflect padding on a (C, H, W) frame."""
    if sigma <= 0.0:
        return frame
    c = frame.shape[0]
    k = _gaussian_kernel1d(sigma, frame.dtype)
    r = (len(k) - 1) // 2
    x = frame.unsqueeze(0)
    x = F.pad(x, (0, 0, r, r), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    x = F.pad(x, (r, r, 0, 0), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return x.squeeze(0)


def _dct8_matrix(dtype: torch.dtype) -> torch.Tensor:
    n = torch.arange(8, dtype=torch.float64)
    k = n[:, None]
    mat = torch.cos(math.pi * (2 * n[None, :] + 1) * k / 16.0)
    mat *= math.sqrt(2.0 / 8.0)
    mat[0] = math.sqrt(1.0 / 8.0)
    return mat.to(dtype)


def block_dct_quantize(channel: torch.Tensor, quality: int) -> torch.Tensor:
    """8x8 block DCT, uniform quantization scaled by quality, inverse DCT."""
    h, w = channel.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = F.pad(channel.unsqueeze(0).unsqueeze(0), (0, pw, 0, ph), mode="replicate")[0, 0]
    hh, ww = x.shape
    blocks = x.reshape(hh // 8, 8, ww // 8, 8).permute(0, 2, 1, 3)
    d = _dct8_matrix(channel.dtype)
    coeff = d @ blocks @ d.T
    step = (100 - quality) / 200.0
    coeff = torch.round(coeff / step) * step
    out = (d.T @ coeff @ d).permute(0, 2, 1, 3).reshape(hh, ww)
    return out[:h, :w]


def compression_proxy(frame: torch.Tensor, quality: int) -> torch.Tensor:
    """Quantize the luma plane; chroma passes through untouched."""
    if quality >= LOSSLESS_QUALITY:
        return frame
    if frame.shape[0] == 3:
        r, g, b = frame[0], frame[1], frame[2]
        y = 0.299 * r + 0.587 * g + 0.114 * b
        cb = -0.168736 * r - 0.331264 * g + 0.5 * b
        cr = 0.5 * r - 0.418688 * g - 0.081312 * b
        yq = block_dct_quantize(y, quality)
        out = torch.stack([
            yq + 1.402 * cr,
            yq - 0.344136 * cb - 0.714136 * cr,
            yq + 1.772 * cb,
        ])
        return out
    return torch.stack([block_dct_quantize(ch, quality) for ch in frame])


def downup_resample(frame: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return frame
    c, h, w = frame.shape
    x = frame.unsqueeze(0)
    x = F.interpolate(x, size=(max(1, h // factor), max(1, w // factor)),
                      mode="bilinear", align_corners=False)
    x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    return x.squeeze(0)


def apply_second_order(frame: torch.Tensor, params: DegradationParams,
                       rng: np.random.Generator) -> torch.Tensor:
    """Blur -> noise -> down/up -> compression, `order` times; output in [0,1].

    Identity parameters skip every step, so the input passes through
    bitwise untouched.
    """
    out = frame
    for _ in range(params.order):
        out = gaussian_blur(out, params.blur_sigma)
        if params.noise_sigma > 0.0:
            noise = rng.standard_normal(size=tuple(out.shape), dtype=np.float32)
            out = out + params.noise_sigma * torch.from_numpy(noise).to(out.dtype)
        out = downup_resample(out, params.down_factor)
        out = compression_proxy(out, params.jpeg_quality)
        if not params.is_identity:
            out = out.clamp(0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# curriculum stages


def degrade_stage1(clip: VideoClip, params: DegradationParams,
                   seed: int) -> tuple[VideoClip, DegradationTrace]:
    """Every frame gets the same parameters; noise realizations still differ."""
    frames = [apply_second_order(clip.data[:, k], params, np_rng(seed, "s1", "noise", k))
              for k in range(clip.frames)]
    out = VideoClip(torch.stack(frames, dim=1))
    trace = DegradationTrace(frames=[params] * clip.frames, stage="S1", seed=seed)
    return out, trace


def chain_step(prev: DegradationParams, seed: int, k: int, p: float) -> DegradationParams:
    """Frame k's parameters from frame k-1's: kept with probability 1-p,
    otherwise jittered +-25% (continuous fields) with factor/quality resampled.

    Pure in (prev, seed, k, p), so any frame of the chain can be regenerated
    without replaying the predecessors' RNG.
    """
    rng = np_rng(seed, "s2", "chain", k)
    if rng.uniform() >= p:
        return prev
    blur = float(np.clip(prev.blur_sigma * rng.uniform(1 - JITTER, 1 + JITTER), 0.0, BLUR_MAX))
    noise = float(np.clip(prev.noise_sigma * rng.uniform(1 - JITTER, 1 + JITTER), 0.0, NOISE_MAX))
    down = int(rng.choice(DOWN_FACTORS))
    quality = int(rng.integers(QUALITY_MIN, QUALITY_MAX + 1))
    return replace(prev, blur_sigma=blur, noise_sigma=noise,
                   down_factor=down, jpeg_quality=quality)


def degrade_stage2(clip: VideoClip, init_params: DegradationParams, p: float,
                   seed: int) -> tuple[VideoClip, DegradationTrace]:
    """Markov-chained per-frame parameters; frame 0 uses init_params."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"perturbation probability must be in [0,1], got {p}")
    per_frame = [init_params]
    for k in range(1, clip.frames):
        per_frame.append(chain_step(per_frame[-1], seed, k, p))
    frames = [apply_second_order(clip.data[:, k], per_frame[k], np_rng(seed, "s2", "noise", k))
              for k in range(clip.frames)]
    out = VideoClip(torch.stack(frames, dim=1))
    trace = DegradationTrace(frames=per_frame, stage="S2", seed=seed, p=p)
    return out, trace


def sample_params(rng: np.random.Generator) -> DegradationParams:
    """Training-strength parameter draw: visible but recoverable at 16x16."""
    return DegradationParams(
        blur_sigma=float(rng.uniform(0.2, 1.0)),
        noise_sigma=float(rng.uniform(0.005, 0.04)),
        down_factor=int(rng.choice([1, 2], p=[0.5, 0.5])),
        jpeg_quality=int(rng.integers(55, 91)),
        order=2,
    )


def downup_baseline(clip: VideoClip, factor: int = 2) -> VideoClip:
    """Bicubic-style restoration baseline: plain down/up resample per frame."""
    frames = [downup_resample(clip.data[:, k], factor) for k in range(clip.frames)]
    return VideoClip(torch.stack(frames, dim=1).clamp(0.0, 1.0))
