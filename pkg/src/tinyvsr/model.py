"""Small diffusion transformer with per-head attention dispatch.

The encoder is pixel-unshuffle (grid.py); the clip's unshuffled tensor IS
the latent, so encode/decode round-trips are exact and parameter-free. The
network maps that latent to model width (the learned input projection),
adds a factorized sinusoidal position code and a timestep embedding, runs
pre-norm transformer blocks whose heads each follow their routed pattern,
and reads out through a zero-initialized linear head. Two output heads
share the trunk: one predicts velocity (used by the one-step restoration
rule), one predicts noise (used by the clean-latent estimate); the config
switch picks which is active.

The noise schedule is the linear rectified-flow pair alpha(t) = 1 - t/1000,
sigma(t) = t/1000: a desk-scale stand-in with exactly checkable algebra.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn

from .attention import (PATTERN_GLOBAL, PATTERN_INTRA, PATTERN_WINDOW, WindowSpec,
                        global_attn_tensor, intra_attn_tensor, window_attn_tensor)
from .errors import ConfigError, DimensionError, NumericError
from .grid import LatentGrid
from .util import torch_gen

PARAM_VELOCITY = "velocity"
PARAM_NOISE = "noise"

ODIT_MAGIC = b"ODIT"
ODIT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    frames: int = 8
    height: int = 16
    width: int = 16
    r: int = 4
    layers: int = 2
    heads: int = 4
    head_dim: int = 16
    t_latent: int = 799
    mlp_ratio: int = 4
    parameterization: str = PARAM_VELOCITY

    def __post_init__(self):
        if self.height % self.r or self.width % self.r:
            raise ConfigError(f"r={self.r} must divide clip dims ({self.height},{self.width})")
        if not 0 <= self.t_latent < 1000:
            raise ConfigError(f"t_latent must be in [0,1000), got {self.t_latent}")
        if self.dim % 2:
            raise ConfigError(f"model dim must be even, got {self.dim}")
        if self.parameterization not in (PARAM_VELOCITY, PARAM_NOISE):
            raise ConfigError(f"unknown parameterization {self.parameterization!r}")

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def latent_dim(self) -> int:
        return self.channels * self.r * self.r

    @property
    def token_grid(self) -> tuple[int, int, int]:
        return (self.frames, self.height // self.r, self.width // self.r)

    @property
    def n_heads_total(self) -> int:
        return self.layers * self.heads


class NoiseSchedule:
    """Linear schedule alpha(t) = 1 - t/1000, sigma(t) = t/1000 on t in [0, 1000)."""

    T_MAX = 1000

    def _check(self, t) -> float:
        t = float(t)
        if not 0 <= t < self.T_MAX:
            raise ValueError(f"timestep {t} outside [0,{self.T_MAX})")
        return t

    def alpha(self, t) -> float:
        return 1.0 - self._check(t) / self.T_MAX

    def sigma(self, t) -> float:
        return self._check(t) / self.T_MAX


LINEAR_SCHEDULE = NoiseSchedule()


def add_noise(z0: LatentGrid, noise: LatentGrid, t,
              schedule: NoiseSchedule = LINEAR_SCHEDULE) -> LatentGrid:
    """Forward corruption alpha(t) * z0 + sigma(t) * noise, elementwise."""
    if z0.data.shape != noise.data.shape:
        raise DimensionError(
            f"latent/noise shapes differ: {tuple(z0.data.shape)} vs {tuple(noise.data.shape)}")
    out = schedule.alpha(t) * z0.data + schedule.sigma(t) * noise.data
    return LatentGrid(out, spatial_factor=z0.spatial_factor)


def estimate_clean_from_noise_pred(z_t: LatentGrid, eps_hat: LatentGrid, t,
                                   schedule: NoiseSchedule = LINEAR_SCHEDULE) -> LatentGrid:
    """One-step clean-latent estimate (z_t - sigma(t) * eps_hat) / alpha(t)."""
    if z_t.data.shape != eps_hat.data.shape:
        raise DimensionError(
            f"latent/prediction shapes differ: {tuple(z_t.data.shape)} vs {tuple(eps_hat.data.shape)}")
    alpha = schedule.alpha(t)
    if alpha == 0.0:
        raise NumericError(f"schedule is singular at t={t} (alpha=0)")
    out = (z_t.data - schedule.sigma(t) * eps_hat.data) / alpha
    return LatentGrid(out, spatial_factor=z_t.spatial_factor)


def sinusoidal_embedding_1d(dim: int, position) -> torch.Tensor:
    """[cos | sin] embedding of scalar or 1-D positions, float64 math."""
    assert dim % 2 == 0
    half = dim // 2
    position = torch.as_tensor(position, dtype=torch.float64).reshape(-1)
    freqs = torch.pow(10000.0, -torch.arange(half, dtype=torch.float64) / half)
    angles = torch.outer(position, freqs)
    return torch.cat([torch.cos(angles), torch.sin(angles)], dim=1)


def factorized_position_embedding(dim: int, grid: tuple[int, int, int]) -> torch.Tensor:
    """(S, dim) additive code: channel pairs split across the t/h/w axes.

    The split follows the usual 3D factorization: c = dim/2 pairs divided as
    [c - 2(c//3), c//3, c//3] for (t, h, w); tiny dims may leave the spatial
    chunks empty.
    """
    gt, gh, gw = grid
    c = dim // 2
    split = (c - 2 * (c // 3), c // 3, c // 3)
    chunks = []
    for extent, pairs, axis in zip(grid, split, range(3)):
        if pairs == 0:
            continue
        emb = sinusoidal_embedding_1d(2 * pairs, torch.arange(extent))  # (extent, 2*pairs)
        shape = [1, 1, 1, 2 * pairs]
        shape[axis] = extent
        expand = [gt, gh, gw, 2 * pairs]
        chunks.append(emb.reshape(shape).expand(expand))
    out = torch.cat(chunks, dim=-1).reshape(gt * gh * gw, dim)
    return out.to(torch.float32)


class Block(nn.Module):
    """Pre-norm transformer block with per-head pattern dispatch."""

    def __init__(self, dim: int, heads: int, head_dim: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def attend(self, x: torch.Tensor, grid: tuple[int, int, int],
               patterns: list[str], spec: WindowSpec | None,
               recorder: list | None = None) -> torch.Tensor:
        s, dim = x.shape
        qkv = self.qkv(self.norm1(x)).reshape(s, 3, self.heads, self.head_dim)
        q, k, v = (qkv[:, j].permute(1, 0, 2) for j in range(3))  # each (N, S, d)
        if recorder is not None:
            recorder.append((q.detach().clone(), k.detach().clone(), v.detach().clone()))
        out = torch.empty_like(q)
        for pattern in (PATTERN_GLOBAL, PATTERN_INTRA, PATTERN_WINDOW):
            idx = [h for h, p in enumerate(patterns) if p == pattern]
            if not idx:
                continue
            if pattern == PATTERN_GLOBAL:
                res = global_attn_tensor(q[idx], k[idx], v[idx])
            elif pattern == PATTERN_INTRA:
                res = intra_attn_tensor(q[idx], k[idx], v[idx], grid)
            else:
                res = window_attn_tensor(q[idx], k[idx], v[idx], grid, spec)
            out[idx] = res
        merged = out.permute(1, 0, 2).reshape(s, dim)
        return self.proj(merged)

    def feed_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.norm2(x))


class ToyDiT(nn.Module):
    """Latent-to-latent denoiser; output meaning set by config.parameterization."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dim = config.dim
        self.in_proj = nn.Linear(config.latent_dim, dim)
        self.t_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.blocks = nn.ModuleList(
            Block(dim, config.heads, config.head_dim, config.mlp_ratio)
            for _ in range(config.layers))
        self.norm_out = nn.LayerNorm(dim)
        self.head_velocity = nn.Linear(dim, config.latent_dim)
        self.head_noise = nn.Linear(dim, config.latent_dim)
        self.register_buffer(
            "pos_embedding", factorized_position_embedding(dim, config.token_grid))

    def active_head(self) -> nn.Linear:
        return (self.head_velocity if self.config.parameterization == PARAM_VELOCITY
                else self.head_noise)

    def _patterns_for_layer(self, layer: int, assignment) -> tuple[list[str], WindowSpec | None]:
        if assignment is None:
            return [PATTERN_GLOBAL] * self.config.heads, None
        if assignment.n_heads != self.config.n_heads_total:
            raise ConfigError(
                f"assignment covers {assignment.n_heads} heads, model has "
                f"{self.config.n_heads_total}")
        patterns = [assignment.pattern_for(layer, h) for h in range(self.config.heads)]
        return patterns, assignment.window_spec

    def forward(self, latent: LatentGrid, t, assignment=None,
                recorder: list | None = None) -> LatentGrid:
        cfg = self.config
        grid = cfg.token_grid
        if latent.grid != grid or latent.dim != cfg.latent_dim:
            raise ConfigError(
                f"latent grid {latent.grid} dim {latent.dim} does not match model "
                f"({grid}, {cfg.latent_dim})")
        dtype = self.in_proj.weight.dtype
        x = self.in_proj(latent.tokens().to(dtype))
        temb = self.t_mlp(sinusoidal_embedding_1d(cfg.dim, float(t)).to(dtype))
        x = x + self.pos_embedding + temb
        for i, block in enumerate(self.blocks):
            patterns, spec = self._patterns_for_layer(i, assignment)
            x = x + block.attend(x, grid, patterns, spec, recorder=recorder)
            x = x + block.feed_forward(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activation after layer {i}")
        out = self.active_head()(self.norm_out(x))
        return LatentGrid.from_tokens(out, grid, spatial_factor=cfg.r)

    @torch.no_grad()
    def collect_head_tensors(self, latent: LatentGrid, t) -> list[tuple]:
        """Per-layer (q, k, v) tensors of shape (heads, S, d), all-global pass."""
        recorder: list = []
        self.forward(latent, t, assignment=None, recorder=recorder)
        return recorder


def dit_forward(model: ToyDiT, z: LatentGrid, t, assignment=None) -> LatentGrid:
    return model(z, t, assignment=assignment)


def one_step_reconstruct(z_l: LatentGrid, model: ToyDiT, assignment=None,
                         schedule: NoiseSchedule = LINEAR_SCHEDULE) -> LatentGrid:
    """Restored latent z_L - sigma(T_L) * model(z_L, T_L)."""
    pred = model(z_l, model.config.t_latent, assignment=assignment)
    sigma = schedule.sigma(model.config.t_latent)
    return LatentGrid(z_l.data.to(pred.data.dtype) - sigma * pred.data,
                      spatial_factor=z_l.spatial_factor)


def init_weights(model: ToyDiT, seed: int) -> ToyDiT:
    """Deterministic re-init from a seed; output heads start at zero so the
    restorer is the identity map at init."""
    for name, p in sorted(model.named_parameters()):
        if name.startswith(("head_velocity", "head_noise")):
            p.data.zero_()
        elif name.endswith(".weight") and p.ndim == 2:
            bound = 1.0 / math.sqrt(p.shape[1])
            p.data.uniform_(-bound, bound, generator=torch_gen(seed, "param", name))
        elif "norm" in name.lower() and p.ndim == 1 and name.endswith(".weight"):
            p.data.fill_(1.0)
        else:
            p.data.zero_()
    return model


def build_model(config: ModelConfig, seed: int = 0) -> ToyDiT:
    return init_weights(ToyDiT(config), seed)


# ---------------------------------------------------------------------------
# checkpoint format


_CONFIG_FIELDS = ("channels", "frames", "height", "width", "r", "layers",
                  "heads", "head_dim", "t_latent", "mlp_ratio")


def _pack_config(cfg: ModelConfig) -> bytes:
    ints = struct.pack("<10I", *(getattr(cfg, f) for f in _CONFIG_FIELDS))
    return ints + struct.pack("<B", 0 if cfg.parameterization == PARAM_VELOCITY else 1)


def _unpack_config(blob: bytes) -> ModelConfig:
    vals = struct.unpack("<10I", blob[:40])
    (pbyte,) = struct.unpack("<B", blob[40:41])
    kwargs = dict(zip(_CONFIG_FIELDS, vals))
    kwargs["parameterization"] = PARAM_VELOCITY if pbyte == 0 else PARAM_NOISE
    return ModelConfig(**kwargs)


CONFIG_BLOB_SIZE = 41
HEADER_SIZE = len(ODIT_MAGIC) + 1 + CONFIG_BLOB_SIZE


def save_model(path, model: ToyDiT, extra: bytes = b"") -> None:
    """ODIT container: magic, version, fixed-width config, f32 LE parameter
    tensors in declaration order; optional trailing extension block.
    A sidecar `<path>.manifest.json` records parameter names/shapes/offsets.
    """
    manifest = []
    offset = 0
    blobs = []
    for name, p in model.named_parameters():
        arr = p.detach().to(torch.float32).numpy().astype("<f4")
        blobs.append(arr.tobytes())
        manifest.append({"name": name, "shape": list(p.shape),
                         "offset": offset, "numel": arr.size})
        offset += arr.size
    with open(path, "wb") as f:
        f.write(ODIT_MAGIC)
        f.write(struct.pack("<B", ODIT_VERSION))
        f.write(_pack_config(model.config))
        for b in blobs:
            f.write(b)
        f.write(extra)
    with open(str(path) + ".manifest.json", "w") as f:
        json.dump({"version": ODIT_VERSION, "header_bytes": HEADER_SIZE,
                   "params": manifest}, f, indent=1)


def load_model(path) -> tuple[ToyDiT, bytes]:
    """Rebuild the model from an ODIT file; returns (model, extension bytes)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != ODIT_MAGIC:
        raise ConfigError(f"bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack("<B", raw[4:5])
    if version != ODIT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    cfg = _unpack_config(raw[5:5 + CONFIG_BLOB_SIZE])
    model = ToyDiT(cfg)
    pos = HEADER_SIZE
    for name, p in model.named_parameters():
        n = p.numel()
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(tuple(p.shape))
        p.data = torch.from_numpy(arr.copy())
        pos += 4 * n
    return model, raw[pos:]
