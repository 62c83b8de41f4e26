"""The three attention patterns over flattened 3D token grids.

Tokens are a (T, H', W') grid flattened t-major (see grid.token_index).
Three patterns share one scaled-dot-product core:

  * global — every query sees all S keys;
  * intra  — keys restricted to the query's own frame;
  * window — keys restricted to a clipped (P_t, P_h, P_w) box around the
    query, extents odd, radii floor(P/2), no padding tokens.

Kernels accept any leading batch dims on (..., S, d) tensors so the model
can dispatch groups of heads at once. The windowed compute path gathers
per-query neighborhoods and never materializes an S x S matrix; dense maps
exist only behind attention_map(), which is the profiling surface.

masked_global_oracle is the brute-force reference (explicit exp / sum over
-inf-masked dense logits) that the pattern kernels are tested against; it
deliberately shares no code with them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F

from .errors import DegenerateMaskError, DimensionError, NumericError

PATTERN_GLOBAL = "global"
PATTERN_INTRA = "intra"
PATTERN_WINDOW = "window"
PATTERNS = (PATTERN_GLOBAL, PATTERN_INTRA, PATTERN_WINDOW)


@dataclass(frozen=True)
class WindowSpec:
    """Odd (P_t, P_h, P_w) window extents; radius along each axis is P // 2."""

    p_t: int
    p_h: int
    p_w: int

    def __post_init__(self):
        for p in (self.p_t, self.p_h, self.p_w):
            if p < 1 or p % 2 == 0:
                raise ValueError(f"window extents must be odd and >= 1, got {self.extents}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.p_t, self.p_h, self.p_w)

    @property
    def radii(self) -> tuple[int, int, int]:
        return (self.p_t // 2, self.p_h // 2, self.p_w // 2)

    def covers(self, grid: tuple[int, int, int]) -> bool:
        """True when every query's window spans the whole grid."""
        return all(p >= 2 * g - 1 for p, g in zip(self.extents, grid))


@dataclass
class HeadTensors:
    """Per-head Q, K, V of shape (S, d) over a (T, H', W') grid."""

    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    grid: tuple[int, int, int]

    def __post_init__(self):
        s = self.q.shape
        if self.k.shape != s or self.v.shape != s or len(s) != 2:
            raise DimensionError("Q, K, V must share an (S, d) shape")
        t, h, w = self.grid
        if s[0] != t * h * w:
            raise DimensionError(f"S={s[0]} does not match grid {self.grid}")
        for name, x in (("Q", self.q), ("K", self.k), ("V", self.v)):
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite values in {name}")

    @property
    def s(self) -> int:
        return self.q.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]


@dataclass
class AttentionMap:
    """Row-stochastic S x S matrix; entries off the pattern's support are exactly 0."""

    rows: torch.Tensor
    pattern: str


# ---------------------------------------------------------------------------
# neighborhood tables


def window_neighborhood(t: int, h: int, w: int, spec: WindowSpec,
                        grid: tuple[int, int, int]) -> list[int]:
    """Flat indices of the clipped window around (t, h, w), ordered by token_index."""
    gt, gh, gw = grid
    if not (0 <= t < gt and 0 <= h < gh and 0 <= w < gw):
        raise IndexError(f"query ({t},{h},{w}) outside grid {grid}")
    rt, rh, rw = spec.radii
    out = []
    for tt in range(max(0, t - rt), min(gt - 1, t + rt) + 1):
        for hh in range(max(0, h - rh), min(gh - 1, h + rh) + 1):
            for ww in range(max(0, w - rw), min(gw - 1, w + rw) + 1):
                out.append(tt * gh * gw + hh * gw + ww)
    return out


@lru_cache(maxsize=64)
def window_table(grid: tuple[int, int, int],
                 extents: tuple[int, int, int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Padded (S, P_t*P_h*P_w) neighbor index table plus validity mask.

    Offsets are enumerated row-major, so valid entries per row are ordered
    by token_index. Padded slots carry index 0 and mask False. Cached
    tensors are shared; treat them as read-only.
    """
    gt, gh, gw = grid
    rt, rh, rw = (e // 2 for e in extents)
    coords_t = torch.arange(gt).view(gt, 1, 1).expand(gt, gh, gw).reshape(-1)
    coords_h = torch.arange(gh).view(1, gh, 1).expand(gt, gh, gw).reshape(-1)
    coords_w = torch.arange(gw).view(1, 1, gw).expand(gt, gh, gw).reshape(-1)
    off_t, off_h, off_w = torch.meshgrid(
        torch.arange(-rt, rt + 1), torch.arange(-rh, rh + 1), torch.arange(-rw, rw + 1),
        indexing="ij")
    off_t, off_h, off_w = off_t.reshape(-1), off_h.reshape(-1), off_w.reshape(-1)
    nt = coords_t.unsqueeze(1) + off_t.unsqueeze(0)        # (S, P^3)
    nh = coords_h.unsqueeze(1) + off_h.unsqueeze(0)
    nw = coords_w.unsqueeze(1) + off_w.unsqueeze(0)
    mask = ((nt >= 0) & (nt < gt) & (nh >= 0) & (nh < gh) & (nw >= 0) & (nw < gw))
    idx = (nt * gh * gw + nh * gw + nw).masked_fill(~mask, 0)
    return idx, mask


# ---------------------------------------------------------------------------
# pattern kernels on (..., S, d) tensors


def global_attn_tensor(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    d = q.shape[-1]
    logits = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(d)
    return torch.matmul(F.softmax(logits, dim=-1), v)


def intra_attn_tensor(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                      grid: tuple[int, int, int]) -> torch.Tensor:
    t, gh, gw = grid
    hw = gh * gw
    lead = q.shape[:-2]
    d = q.shape[-1]
    qf = q.reshape(*lead, t, hw, d)
    kf = k.reshape(*lead, t, hw, d)
    vf = v.reshape(*lead, t, hw, d)
    logits = torch.matmul(qf, kf.transpose(-1, -2)) / math.sqrt(d)
    out = torch.matmul(F.softmax(logits, dim=-1), vf)
    return out.reshape(*lead, t * hw, d)


def window_attn_tensor(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                       grid: tuple[int, int, int], spec: WindowSpec) -> torch.Tensor:
    idx, mask = window_table(grid, spec.extents)
    kw = k[..., idx, :]                                    # (..., S, P^3, d)
    vw = v[..., idx, :]
    d = q.shape[-1]
    logits = torch.matmul(kw, q.unsqueeze(-1)).squeeze(-1) / math.sqrt(d)
    logits = logits.masked_fill(~mask, float("-inf"))
    weights = F.softmax(logits, dim=-1)                    # padded slots -> exact 0
    return (weights.unsqueeze(-1) * vw).sum(dim=-2)


# ---------------------------------------------------------------------------
# single-head public operations


def global_attention(ht: HeadTensors) -> torch.Tensor:
    return global_attn_tensor(ht.q, ht.k, ht.v)


def intra_frame_attention(ht: HeadTensors) -> torch.Tensor:
    return intra_attn_tensor(ht.q, ht.k, ht.v, ht.grid)


def window_attention(ht: HeadTensors, spec: WindowSpec) -> torch.Tensor:
    return window_attn_tensor(ht.q, ht.k, ht.v, ht.grid, spec)


def pattern_attention(ht: HeadTensors, pattern: str, spec: WindowSpec | None = None) -> torch.Tensor:
    if pattern == PATTERN_GLOBAL:
        return global_attention(ht)
    if pattern == PATTERN_INTRA:
        return intra_frame_attention(ht)
    if pattern == PATTERN_WINDOW:
        if spec is None:
            raise ValueError("window pattern requires a WindowSpec")
        return window_attention(ht, spec)
    raise ValueError(f"unknown pattern {pattern!r}")


def attention_map(ht: HeadTensors, pattern: str, spec: WindowSpec | None = None) -> AttentionMap:
    """Dense row-stochastic S x S map for one head under the given pattern."""
    s = ht.s
    d = ht.d
    if pattern == PATTERN_GLOBAL:
        logits = (ht.q @ ht.k.T) / math.sqrt(d)
        rows = F.softmax(logits, dim=-1)
    elif pattern == PATTERN_INTRA:
        t, gh, gw = ht.grid
        hw = gh * gw
        qf = ht.q.reshape(t, hw, d)
        kf = ht.k.reshape(t, hw, d)
        blocks = F.softmax(torch.matmul(qf, kf.transpose(-1, -2)) / math.sqrt(d), dim=-1)
        rows = torch.zeros(s, s, dtype=ht.q.dtype)
        for fi in range(t):
            a, b = fi * hw, (fi + 1) * hw
            rows[a:b, a:b] = blocks[fi]
    elif pattern == PATTERN_WINDOW:
        if spec is None:
            raise ValueError("window pattern requires a WindowSpec")
        idx, mask = window_table(ht.grid, spec.extents)
        kw = ht.k[idx, :]
        logits = torch.matmul(kw, ht.q.unsqueeze(-1)).squeeze(-1) / math.sqrt(d)
        logits = logits.masked_fill(~mask, float("-inf"))
        weights = F.softmax(logits, dim=-1)
        rows = torch.zeros(s, s, dtype=ht.q.dtype)
        # padded slots hold exact zeros, so accumulating them is a no-op
        rows.scatter_add_(1, idx, weights)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    return AttentionMap(rows=rows, pattern=pattern)


def masked_global_oracle(ht: HeadTensors, mask: torch.Tensor) -> torch.Tensor:
    """Brute-force reference: explicit exp/sum over -inf-masked dense logits."""
    if mask.shape != (ht.s, ht.s) or mask.dtype != torch.bool:
        raise DimensionError(f"mask must be boolean ({ht.s},{ht.s}), got {tuple(mask.shape)}")
    if not mask.any(dim=1).all():
        raise DegenerateMaskError("mask has a row with no admissible keys")
    logits = (ht.q @ ht.k.T) / math.sqrt(ht.d)
    neg = torch.tensor(float("-inf"), dtype=logits.dtype)
    masked = torch.where(mask, logits, neg)
    shifted = masked - masked.max(dim=1, keepdim=True).values
    expv = torch.where(mask, torch.exp(shifted), torch.zeros((), dtype=logits.dtype))
    weights = expv / expv.sum(dim=1, keepdim=True)
    return weights @ ht.v


def pattern_mask(pattern: str, grid: tuple[int, int, int],
                 spec: WindowSpec | None = None) -> torch.Tensor:
    """Boolean S x S mask describing a pattern's allowed key set."""
    gt, gh, gw = grid
    s = gt * gh * gw
    if pattern == PATTERN_GLOBAL:
        return torch.ones(s, s, dtype=torch.bool)
    if pattern == PATTERN_INTRA:
        frame = torch.arange(s) // (gh * gw)
        return frame.unsqueeze(1) == frame.unsqueeze(0)
    if pattern == PATTERN_WINDOW:
        if spec is None:
            raise ValueError("window pattern requires a WindowSpec")
        idx, valid = window_table(grid, spec.extents)
        mask = torch.zeros(s, s, dtype=torch.bool)
        rows = torch.arange(s).unsqueeze(1).expand_as(idx)
        mask[rows[valid], idx[valid]] = True
        return mask
    raise ValueError(f"unknown pattern {pattern!r}")
