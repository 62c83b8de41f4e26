"""Per-head pattern routing: KL-score every head, localize the closest fits.

For each head we compare its dense global attention map against the
intra-frame and window alternatives built from the same Q/K/V (captured with
the whole model still running global everywhere). Rows are compared with a
smoothed KL divergence, averaged over query rows and calibration clips. A
head's score is the smaller of its two divergences; heads are sorted by
score and the N - ceil(rho*N) smallest are reassigned to their preferred
localized pattern, the rest stay global.

Localized maps are zero off-support, so KL(global || local) would be
infinite; the second argument is therefore mixed with eps-uniform mass
(default eps = 1e-6). A reverse direction (local || smoothed global) is
available behind the `direction` flag for comparison.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from .attention import (PATTERN_GLOBAL, PATTERN_INTRA, PATTERN_WINDOW, AttentionMap,
                        HeadTensors, WindowSpec, attention_map)
from .errors import ConfigError, DimensionError
from .grid import pixel_unshuffle
from .util import fmt_float

DEFAULT_EPS = 1e-6
DEFAULT_RHO = 0.4
DEFAULT_WINDOW = WindowSpec(3, 5, 5)

ASSIGNMENT_VERSION = 1


def _kl_rows(p: np.ndarray, q: np.ndarray, eps: float) -> np.ndarray:
    """Row-wise KL(p || (1-eps) q + eps/S) on (R, S) float64 arrays."""
    s = p.shape[-1]
    q_smooth = (1.0 - eps) * q + eps / s
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0) / q_smooth), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def kl_divergence(p, q, eps: float = DEFAULT_EPS) -> float:
    """KL(p || q~) with q~ = (1-eps) q + eps * uniform; clamped to >= 0."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise DimensionError(f"distribution lengths differ: {p.shape[0]} vs {q.shape[0]}")
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("distributions must be nonnegative")
    for name, x in (("p", p), ("q", q)):
        if abs(x.sum() - 1.0) > 1e-5:
            raise ValueError(f"{name} does not sum to 1 (got {x.sum()})")
    return float(_kl_rows(p[None, :], q[None, :], eps)[0])


@dataclass(frozen=True)
class HeadScore:
    layer: int
    head: int
    s_intra: float
    s_window: float

    @property
    def s(self) -> float:
        return min(self.s_intra, self.s_window)

    @property
    def m(self) -> str:
        """Preferred localized pattern; ties go to intra (the cheaper one)."""
        return PATTERN_INTRA if self.s_intra <= self.s_window else PATTERN_WINDOW


def head_scores(layer: int, head: int,
                maps_g: list[AttentionMap], maps_i: list[AttentionMap],
                maps_w: list[AttentionMap], eps: float = DEFAULT_EPS,
                direction: str = "forward") -> HeadScore:
    """Mean row-wise KL between one head's global and localized maps.

    Each list holds one map per calibration clip; the expectation runs over
    all query rows of all clips, accumulated in clip order in float64.
    """
    if not maps_g:
        raise ValueError("calibration set is empty")
    if not (len(maps_g) == len(maps_i) == len(maps_w)):
        raise ValueError("per-pattern map lists must have equal length")
    if direction not in ("forward", "reverse"):
        raise ValueError(f"unknown KL direction {direction!r}")
    sum_i = sum_w = 0.0
    rows_total = 0
    for mg, mi, mw in zip(maps_g, maps_i, maps_w):
        g = mg.rows.detach().to(torch.float64).numpy()
        i = mi.rows.detach().to(torch.float64).numpy()
        w = mw.rows.detach().to(torch.float64).numpy()
        if direction == "forward":
            sum_i += float(_kl_rows(g, i, eps).sum())
            sum_w += float(_kl_rows(g, w, eps).sum())
        else:
            sum_i += float(_kl_rows(i, g, eps).sum())
            sum_w += float(_kl_rows(w, g, eps).sum())
        rows_total += g.shape[0]
    return HeadScore(layer=layer, head=head,
                     s_intra=sum_i / rows_total, s_window=sum_w / rows_total)


@dataclass(frozen=True)
class Assignment:
    layer: int
    head: int
    pattern: str
    score: HeadScore


@dataclass
class AssignmentMap:
    """Per-(layer, head) pattern assignments plus the scores behind them."""

    entries: list[Assignment]
    rho: float
    window_spec: WindowSpec
    eps: float = DEFAULT_EPS
    calibration_count: int = 0
    calibration_seed: int = 0

    def __post_init__(self):
        self._by_head = {(e.layer, e.head): e.pattern for e in self.entries}
        if len(self._by_head) != len(self.entries):
            raise ConfigError("duplicate (layer, head) entries in assignment")

    @property
    def n_heads(self) -> int:
        return len(self.entries)

    @property
    def n_global(self) -> int:
        return sum(1 for e in self.entries if e.pattern == PATTERN_GLOBAL)

    def pattern_for(self, layer: int, head: int) -> str:
        key = (layer, head)
        if key not in self._by_head:
            raise ConfigError(f"no assignment for layer={layer} head={head}")
        return self._by_head[key]

    def global_set(self) -> set[tuple[int, int]]:
        return {(e.layer, e.head) for e in self.entries if e.pattern == PATTERN_GLOBAL}

    def save(self, path) -> None:
        """Hand-rolled JSON writer; scores carry 17 significant digits."""
        pt, ph, pw = self.window_spec.extents
        lines = [
            "{",
            f'  "version": {ASSIGNMENT_VERSION},',
            f'  "rho": {fmt_float(self.rho)},',
            f'  "window": [{pt}, {ph}, {pw}],',
            f'  "eps": {fmt_float(self.eps)},',
            f'  "calibration": {{"count": {self.calibration_count}, "seed": {self.calibration_seed}}},',
            '  "heads": [',
        ]
        for j, e in enumerate(sorted(self.entries, key=lambda e: (e.layer, e.head))):
            comma = "," if j + 1 < len(self.entries) else ""
            lines.append(
                f'    {{"layer": {e.layer}, "head": {e.head}, "pattern": "{e.pattern}", '
                f'"s_intra": {fmt_float(e.score.s_intra)}, '
                f'"s_window": {fmt_float(e.score.s_window)}}}{comma}')
        lines += ["  ]", "}", ""]
        with open(path, "w") as f:
            f.write("\n".join(lines))

    @staticmethod
    def load(path) -> "AssignmentMap":
        with open(path) as f:
            doc = json.load(f)
        if doc.get("version") != ASSIGNMENT_VERSION:
            raise ConfigError(f"unsupported assignment version {doc.get('version')!r}")
        entries = [
            Assignment(layer=h["layer"], head=h["head"], pattern=h["pattern"],
                       score=HeadScore(layer=h["layer"], head=h["head"],
                                       s_intra=h["s_intra"], s_window=h["s_window"]))
            for h in doc["heads"]
        ]
        return AssignmentMap(entries=entries, rho=doc["rho"],
                             window_spec=WindowSpec(*doc["window"]), eps=doc["eps"],
                             calibration_count=doc["calibration"]["count"],
                             calibration_seed=doc["calibration"]["seed"])


def n_global_heads(rho: float, n: int) -> int:
    """K = ceil(rho * N); rounded before ceil so representable decimals like
    0.2 * 10 do not spill over to the next integer."""
    return math.ceil(round(rho * n, 9))


def route_heads(scores: list[HeadScore], rho: float, *,
                window_spec: WindowSpec = DEFAULT_WINDOW, eps: float = DEFAULT_EPS,
                calibration_count: int = 0, calibration_seed: int = 0) -> AssignmentMap:
    """Assign the N-K smallest-score heads their preferred localized pattern.

    Ties in s break by (layer, head) ascending, so assignments are
    deterministic and global sets nest as rho grows.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0,1], got {rho}")
    if not scores:
        raise ValueError("need at least one head score")
    n = len(scores)
    k = n_global_heads(rho, n)
    order = sorted(scores, key=lambda sc: (sc.s, sc.layer, sc.head))
    entries = []
    for j, sc in enumerate(order):
        pattern = sc.m if j < n - k else PATTERN_GLOBAL
        entries.append(Assignment(layer=sc.layer, head=sc.head, pattern=pattern, score=sc))
    entries.sort(key=lambda e: (e.layer, e.head))
    return AssignmentMap(entries=entries, rho=rho, window_spec=window_spec, eps=eps,
                         calibration_count=calibration_count,
                         calibration_seed=calibration_seed)


def profile_model(model, clips, window_spec: WindowSpec = DEFAULT_WINDOW,
                  rho: float = DEFAULT_RHO, eps: float = DEFAULT_EPS,
                  direction: str = "forward", calibration_seed: int = 0) -> AssignmentMap:
    """Score and route every head of `model` from a calibration clip set.

    Q/K/V are captured with all heads running global (the pre-routing
    state), one forward per clip at the model's operating timestep; the
    three per-head maps are then derived from those shared tensors.
    """
    if not clips:
        raise ValueError("calibration set is empty")
    cfg = model.config
    for clip in clips:
        if clip.data.shape != (cfg.channels, cfg.frames, cfg.height, cfg.width):
            raise ConfigError(
                f"clip shape {tuple(clip.data.shape)} does not match model config "
                f"({cfg.channels},{cfg.frames},{cfg.height},{cfg.width})")
    grid = cfg.token_grid
    # per clip, per layer: (heads, S, d) tensors captured in one global-mode pass
    captured = []
    with torch.no_grad():
        for clip in clips:
            latent = pixel_unshuffle(clip, cfg.r)
            captured.append(model.collect_head_tensors(latent, cfg.t_latent))
    scores = []
    for layer in range(cfg.layers):
        for head in range(cfg.heads):
            maps_g, maps_i, maps_w = [], [], []
            for per_layer in captured:
                q, k, v = (x[head] for x in per_layer[layer])
                ht = HeadTensors(q, k, v, grid)
                maps_g.append(attention_map(ht, PATTERN_GLOBAL))
                maps_i.append(attention_map(ht, PATTERN_INTRA))
                maps_w.append(attention_map(ht, PATTERN_WINDOW, window_spec))
            scores.append(head_scores(layer, head, maps_g, maps_i, maps_w,
                                      eps=eps, direction=direction))
    return route_heads(scores, rho, window_spec=window_spec, eps=eps,
                       calibration_count=len(clips), calibration_seed=calibration_seed)
