"""Dense video tensors, 3D token grids, and the pixel-(un)shuffle latent mapping.

A clip is a C x T x H x W float32 tensor with values in [0, 1]. The latent
space is its space-to-depth rearrangement: every r x r spatial block becomes
r^2 channels, so a clip maps to a (T, H/r, W/r) token grid with C*r^2
channels and back without losing a single value. Tokens are flattened
t-major, then rows, then columns.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError

OVID_MAGIC = b"OVID"
OVID_VERSION = 1


@dataclass
class VideoClip:
    """Dense pixel tensor of shape (C, T, H, W), float32, values in [0, 1]."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DimensionError(f"clip tensor must be (C,T,H,W), got {tuple(self.data.shape)}")
        if not self.data.dtype.is_floating_point:
            raise DimensionError(f"clip tensor must be floating point, got {self.data.dtype}")
        if not torch.isfinite(self.data).all():
            raise ValueError("clip contains non-finite values")
        lo, hi = self.data.min().item(), self.data.max().item()
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"clip values outside [0,1]: min={lo}, max={hi}")
        self.data = self.data.contiguous()

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @staticmethod
    def from_tensor(data: torch.Tensor, clamp: bool = False) -> "VideoClip":
        if clamp:
            data = data.clamp(0.0, 1.0)
        return VideoClip(data.to(torch.float32))


@dataclass
class LatentGrid:
    """Token tensor of shape (C', T, H', W') over a (T, H', W') grid.

    `spatial_factor` records the unshuffle factor r that produced it
    (C' = C * r^2 relative to the source clip).
    """

    data: torch.Tensor
    spatial_factor: int = 1

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DimensionError(f"latent tensor must be (C',T,H',W'), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("latent contains non-finite values")
        self.data = self.data.contiguous()

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def tokens_count(self) -> int:
        t, h, w = self.grid
        return t * h * w

    def tokens(self) -> torch.Tensor:
        """(S, C') view, rows ordered by token_index (t-major row-major)."""
        return self.data.permute(1, 2, 3, 0).reshape(self.tokens_count, self.dim)

    @staticmethod
    def from_tokens(tokens: torch.Tensor, grid: tuple[int, int, int],
                    spatial_factor: int = 1) -> "LatentGrid":
        t, h, w = grid
        if tokens.shape[0] != t * h * w:
            raise DimensionError(f"token count {tokens.shape[0]} != grid volume {t * h * w}")
        data = tokens.reshape(t, h, w, tokens.shape[1]).permute(3, 0, 1, 2)
        return LatentGrid(data, spatial_factor=spatial_factor)


def pixel_unshuffle(clip: VideoClip, r: int) -> LatentGrid:
    """Space-to-depth per frame: (C,T,H,W) -> (C*r^2, T, H/r, W/r).

    Pure rearrangement; the multiset of values is preserved exactly.
    """
    if r < 1:
        raise DimensionError(f"unshuffle factor must be >= 1, got {r}")
    c, t, h, w = clip.data.shape
    if h % r or w % r:
        raise DimensionError(f"spatial dims ({h},{w}) not divisible by r={r}")
    frames = clip.data.permute(1, 0, 2, 3)          # (T, C, H, W)
    lat = F.pixel_unshuffle(frames, r)              # (T, C*r^2, H/r, W/r)
    return LatentGrid(lat.permute(1, 0, 2, 3).contiguous(), spatial_factor=r)


def pixel_shuffle(latent: LatentGrid, r: int) -> VideoClip:
    """Depth-to-space per frame; exact inverse of :func:`pixel_unshuffle`."""
    if r < 1:
        raise DimensionError(f"shuffle factor must be >= 1, got {r}")
    cp, t, hp, wp = latent.data.shape
    if cp % (r * r):
        raise DimensionError(f"latent dim {cp} not divisible by r^2={r * r}")
    frames = latent.data.permute(1, 0, 2, 3)        # (T, C', H', W')
    pix = F.pixel_shuffle(frames, r)                # (T, C, H, W)
    return VideoClip(pix.permute(1, 0, 2, 3).contiguous())


def shuffle_tensor(latent_data: torch.Tensor, r: int) -> torch.Tensor:
    """Depth-to-space on a raw (C',T,H',W') tensor, without clip validation.

    Used on model predictions, which may leave [0,1] before clamping.
    """
    frames = latent_data.permute(1, 0, 2, 3)
    pix = F.pixel_shuffle(frames, r)
    return pix.permute(1, 0, 2, 3).contiguous()


def token_index(t: int, h: int, w: int, grid: tuple[int, int, int]) -> int:
    """Row-major flattening t*H'*W' + h*W' + w; bijective onto [0, S)."""
    gt, gh, gw = grid
    if not (0 <= t < gt and 0 <= h < gh and 0 <= w < gw):
        raise IndexError(f"coordinate ({t},{h},{w}) outside grid {grid}")
    return t * gh * gw + h * gw + w


def save_clip(path, clip: VideoClip) -> None:
    """Write the OVID1 container: magic, version byte, C/T/H/W u32 LE, f32 LE data."""
    c, t, h, w = clip.data.shape
    with open(path, "wb") as f:
        f.write(OVID_MAGIC)
        f.write(struct.pack("<B", OVID_VERSION))
        f.write(struct.pack("<4I", c, t, h, w))
        f.write(clip.data.numpy().astype("<f4").tobytes())


def load_clip(path) -> VideoClip:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != OVID_MAGIC:
            raise ValueError(f"bad clip magic {magic!r}")
        (version,) = struct.unpack("<B", f.read(1))
        if version != OVID_VERSION:
            raise ValueError(f"unsupported clip version {version}")
        c, t, h, w = struct.unpack("<4I", f.read(16))
        raw = f.read(4 * c * t * h * w)
        if len(raw) != 4 * c * t * h * w:
            raise ValueError("truncated clip payload")
        data = np.frombuffer(raw, dtype="<f4").reshape(c, t, h, w)
    return VideoClip(torch.from_numpy(data.copy()))
