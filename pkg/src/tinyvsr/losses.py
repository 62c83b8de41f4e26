"""Training objectives and evaluation metrics.

All reductions run in float64 (inputs are cast up inside each loss), so
reported values are stable across batch shapes and the total decomposes
exactly as latent + perceptual + lambda_warp * warp.

The perceptual term pairs pixel MSE with a feature distance from a fixed,
seed-generated 3-layer conv stack (a stand-in for a pretrained perceptual
network; smooth tanh nonlinearities keep the loss C^1). The temporal term
warps each frame onto its neighbors with the ground-truth flow and takes
the masked mean absolute residual; a 2-pixel border is excluded because
edge-clamped samples are meaningless there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .degrade import FlowField
from .errors import DimensionError, NumericError
from .grid import VideoClip
from .util import torch_gen

DEFAULT_LAMBDA_WARP = 0.1
BORDER = 2
FEATURE_SEED = 60167


@dataclass
class LossReport:
    latent: float
    perceptual: float
    warp: float
    total: float
    lambda_warp: float


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, VideoClip):
        return x.data
    return x


def latent_loss(pred, target) -> torch.Tensor:
    """Mean squared error over all latent elements, float64."""
    p = pred.data if hasattr(pred, "data") and not isinstance(pred, torch.Tensor) else pred
    t = target.data if hasattr(target, "data") and not isinstance(target, torch.Tensor) else target
    if p.shape != t.shape:
        raise DimensionError(f"latent shapes differ: {tuple(p.shape)} vs {tuple(t.shape)}")
    diff = p.to(torch.float64) - t.to(torch.float64)
    return (diff * diff).mean()


class _FeatureNet(nn.Module):
    """Three seed-initialized convolutions; weights are a pure function of
    FEATURE_SEED and the input channel count, never trained."""

    def __init__(self, channels: int):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv2d(channels, 8, 3, padding=1),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.Conv2d(16, 16, 3, padding=1),
        ])
        for i, conv in enumerate(self.convs):
            fan_in = conv.weight.shape[1] * 9
            bound = 1.0 / fan_in ** 0.5
            conv.weight.data.uniform_(-bound, bound,
                                      generator=torch_gen(FEATURE_SEED, "perceptual", i))
            conv.bias.data.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = torch.tanh(conv(x))
        return x


_FEATURE_CACHE: dict[tuple[int, torch.dtype], _FeatureNet] = {}


def feature_net(channels: int, dtype: torch.dtype) -> _FeatureNet:
    key = (channels, dtype)
    if key not in _FEATURE_CACHE:
        _FEATURE_CACHE[key] = _FeatureNet(channels).to(dtype)
    return _FEATURE_CACHE[key]


def perceptual_loss(pred, target) -> torch.Tensor:
    """Pixel MSE plus feature-space MSE from the fixed random extractor."""
    p = _as_tensor(pred)
    t = _as_tensor(target)
    if p.shape != t.shape:
        raise DimensionError(f"clip shapes differ: {tuple(p.shape)} vs {tuple(t.shape)}")
    pd = p.to(torch.float64)
    td = t.to(torch.float64)
    mse = ((pd - td) ** 2).mean()
    net = feature_net(p.shape[0], torch.float64)
    fp = net(pd.permute(1, 0, 2, 3))           # frames as batch
    ft = net(td.permute(1, 0, 2, 3))
    return mse + ((fp - ft) ** 2).mean()


def warp(frame: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward bilinear sampling of a (C, H, W) frame at (y+dy, x+dx).

    Flow is (2, H, W) in (dy, dx) order; sample coordinates clamp to the
    frame edge. Integer flows reproduce exact shifts.
    """
    c, h, w = frame.shape
    if flow.shape != (2, h, w):
        raise DimensionError(f"flow shape {tuple(flow.shape)} != (2,{h},{w})")
    dtype = frame.dtype
    ys = torch.arange(h, dtype=dtype).view(h, 1) + flow[0].to(dtype)
    xs = torch.arange(w, dtype=dtype).view(1, w) + flow[1].to(dtype)
    ys = ys.clamp(0, h - 1).expand(h, w)
    xs = xs.clamp(0, w - 1).expand(h, w)
    y0 = ys.floor()
    x0 = xs.floor()
    fy = (ys - y0).unsqueeze(0)
    fx = (xs - x0).unsqueeze(0)
    y0 = y0.long()
    x0 = x0.long()
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    f00 = frame[:, y0, x0]
    f01 = frame[:, y0, x1]
    f10 = frame[:, y1, x0]
    f11 = frame[:, y1, x1]
    top = f00 + fx * (f01 - f00)
    bot = f10 + fx * (f11 - f10)
    return top + fy * (bot - top)


def temporal_loss(pred, flow: FlowField, border: int = BORDER) -> torch.Tensor:
    """Sum over frame pairs of the masked mean |warped frame - neighbor|.

    Both directions contribute: frame i warped onto i+1 with the backward
    flow, frame i+1 warped onto i with the forward flow. Boundary frames
    only enter the terms that exist for them.
    """
    p = _as_tensor(pred)
    c, t, h, w = p.shape
    if t < 2:
        raise ValueError(f"temporal loss needs >= 2 frames, got {t}")
    if 2 * border >= min(h, w):
        raise ValueError(f"border {border} leaves no interior on {h}x{w} frames")
    sl = (slice(None), slice(border, h - border), slice(border, w - border))
    pd = p.to(torch.float64)
    total = pd.new_zeros(())
    for i in range(t - 1):
        ahead = warp(pd[:, i], flow.backward[i].to(torch.float64))
        total = total + (ahead - pd[:, i + 1])[sl].abs().mean()
        back = warp(pd[:, i + 1], flow.forward[i].to(torch.float64))
        total = total + (back - pd[:, i])[sl].abs().mean()
    return total


def total_loss(components, lambda_warp: float = DEFAULT_LAMBDA_WARP) -> LossReport:
    """Weighted sum of (latent, perceptual, warp), fixed summation order."""
    vals = []
    for v in components:
        v = float(v.item()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise NumericError(f"non-finite loss component {v}")
        vals.append(v)
    lat, per, wrp = vals
    return LossReport(latent=lat, perceptual=per, warp=wrp,
                      total=lat + per + lambda_warp * wrp, lambda_warp=lambda_warp)


def psnr(pred, target) -> float:
    """10 log10(1 / MSE) in dB, capped at 99 when MSE < 1e-10."""
    p = _as_tensor(pred)
    t = _as_tensor(target)
    if p.shape != t.shape:
        raise DimensionError(f"clip shapes differ: {tuple(p.shape)} vs {tuple(t.shape)}")
    for name, x in (("pred", p), ("target", t)):
        if x.min() < 0.0 or x.max() > 1.0:
            raise ValueError(f"{name} values outside [0,1]")
    mse = ((p.to(torch.float64) - t.to(torch.float64)) ** 2).mean().item()
    if mse < 1e-10:
        return 99.0
    return 10.0 * torch.log10(torch.tensor(1.0 / mse, dtype=torch.float64)).item()


def warp_error_metric(pred, flow: FlowField, border: int = BORDER) -> float:
    """Mean absolute warped-neighbor residual, scaled by 1e3."""
    p = _as_tensor(pred)
    t = p.shape[1]
    loss = temporal_loss(p, flow, border=border)
    return float(loss.item()) / (2 * (t - 1)) * 1e3
