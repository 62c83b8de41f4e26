"""Analytic MAC accounting and a small wall-clock bench harness.

MACs count matmul multiply-accumulates only (QKV/output projections,
attention scores, value mixing, MLP); softmax and norms are excluded so
every total is an exact integer. Window neighborhoods are clipped at grid
edges, and their cost sum factorizes per axis, so the closed form is exact.

Wall-clock numbers are medians over repeats and are only ever asserted as
orderings; absolute seconds depend on the host.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field

import torch

from .attention import (PATTERN_GLOBAL, PATTERN_INTRA, PATTERN_WINDOW, WindowSpec,
                        global_attn_tensor, intra_attn_tensor, window_attn_tensor)
from .errors import ConfigError
from .model import ModelConfig
from .util import torch_gen


def _axis_neighbor_sum(extent: int, radius: int) -> int:
    """Sum over positions of the clipped 1-D neighborhood size."""
    return sum(min(pos + radius, extent - 1) - max(pos - radius, 0) + 1
               for pos in range(extent))


def attention_macs(pattern: str, grid: tuple[int, int, int], d: int,
                   spec: WindowSpec | None = None) -> int:
    """Per-head MACs for scores plus value mixing (2 * d per query-key pair)."""
    gt, gh, gw = grid
    s = gt * gh * gw
    if pattern == PATTERN_GLOBAL:
        return 2 * s * s * d
    if pattern == PATTERN_INTRA:
        hw = gh * gw
        return 2 * gt * hw * hw * d
    if pattern == PATTERN_WINDOW:
        if spec is None:
            raise ValueError("window pattern requires a WindowSpec")
        rt, rh, rw = spec.radii
        pairs = (_axis_neighbor_sum(gt, rt) * _axis_neighbor_sum(gh, rh)
                 * _axis_neighbor_sum(gw, rw))
        return 2 * d * pairs
    raise ValueError(f"unknown pattern {pattern!r}")


@dataclass
class CostReport:
    grid: tuple[int, int, int]
    head_dim: int
    tokens: int
    heads: list = field(default_factory=list)      # {layer, head, pattern, macs}
    projections: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)  # label -> median seconds

    @property
    def attention_total(self) -> int:
        return sum(h["macs"] for h in self.heads)

    @property
    def total(self) -> int:
        return self.attention_total + sum(self.projections.values())

    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid), "head_dim": self.head_dim, "tokens": self.tokens,
            "attention_total": self.attention_total,
            "projections": self.projections, "total": self.total,
            "heads": self.heads, "wall_clock": self.wall_clock,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    def table(self) -> str:
        lines = [f"{'component':<24}{'MACs':>16}"]
        for h in self.heads:
            label = f"L{h['layer']}H{h['head']} {h['pattern']}"
            lines.append(f"{label:<24}{h['macs']:>16,}")
        for name, macs in self.projections.items():
            lines.append(f"{name:<24}{macs:>16,}")
        lines.append(f"{'total':<24}{self.total:>16,}")
        for label, sec in self.wall_clock.items():
            lines.append(f"{'time ' + label:<24}{sec:>16.6f}")
        return "\n".join(lines)


def model_macs(config: ModelConfig, assignment,
               grid: tuple[int, int, int] | None = None) -> CostReport:
    """Whole-model MACs with per-head attention cost taken from the assignment.

    Passing assignment=None prices the unrouted (all-global) model.
    """
    grid = grid or config.token_grid
    s = grid[0] * grid[1] * grid[2]
    d = config.head_dim
    dim = config.dim
    cp = config.latent_dim
    report = CostReport(grid=grid, head_dim=d, tokens=s)
    spec = assignment.window_spec if assignment is not None else None
    for layer in range(config.layers):
        for head in range(config.heads):
            pattern = (assignment.pattern_for(layer, head)
                       if assignment is not None else PATTERN_GLOBAL)
            macs = attention_macs(pattern, grid, d, spec)
            report.heads.append({"layer": layer, "head": head,
                                 "pattern": pattern, "macs": macs})
    if assignment is not None and assignment.n_heads != config.n_heads_total:
        raise ConfigError(f"assignment covers {assignment.n_heads} heads, "
                          f"model has {config.n_heads_total}")
    l = config.layers
    report.projections = {
        "in_proj": s * cp * dim,
        "qkv_proj": l * 3 * s * dim * dim,
        "attn_out_proj": l * s * dim * dim,
        "mlp": l * 2 * s * dim * (config.mlp_ratio * dim),
        "timestep_mlp": 2 * dim * dim,
        "out_head": s * dim * cp,
    }
    return report


def bench(patterns, grid: tuple[int, int, int], d: int, repeats: int = 5,
          seed: int = 0) -> CostReport:
    """Median wall-clock per pattern on seeded random tensors.

    `patterns` is a list of (name, spec-or-None); window entries are labeled
    with their extents so several sizes can be compared side by side.
    """
    if repeats < 5:
        raise ValueError(f"need >= 5 repeats for a stable median, got {repeats}")
    s = grid[0] * grid[1] * grid[2]
    gen = torch_gen(seed, "bench")
    q = torch.randn(s, d, generator=gen)
    k = torch.randn(s, d, generator=gen)
    v = torch.randn(s, d, generator=gen)
    report = CostReport(grid=grid, head_dim=d, tokens=s)
    for i, (name, spec) in enumerate(patterns):
        if name == PATTERN_GLOBAL:
            fn = lambda: global_attn_tensor(q, k, v)
            label = name
        elif name == PATTERN_INTRA:
            fn = lambda: intra_attn_tensor(q, k, v, grid)
            label = name
        elif name == PATTERN_WINDOW:
            fn = lambda: window_attn_tensor(q, k, v, grid, spec)
            label = f"window{spec.extents}"
        else:
            raise ValueError(f"unknown pattern {name!r}")
        fn()  # warm-up: builds neighborhood tables, touches caches
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        report.wall_clock[label] = statistics.median(times)
        report.heads.append({"layer": 0, "head": i, "pattern": label,
                             "macs": attention_macs(name, grid, d, spec)})
    return report
