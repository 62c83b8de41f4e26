"""Training: gradients, Adam, and the two-stage progressive curriculum.

Gradients come from reverse-mode differentiation of the dynamically taped
forward graph (rebuilt every step; the model is tiny). The optimizer is a
hand-rolled bias-corrected Adam with an optional decoupled weight-decay
flag. Stage 1 trains on temporally consistent degradations, stage 2 on
Markov-chained per-frame ones; both stages share the identical loss.

Every random draw is keyed by (seed, purpose, step, sample), so the weight
trajectory is a pure function of the config and resuming from a checkpoint
continues it bit for bit.
"""

from __future__ import annotations

import csv
import json
import pathlib
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .attention import WindowSpec
from .degrade import (DEFAULT_PERTURB_P, FlowField, degrade_stage1, degrade_stage2,
                      downup_baseline, gen_clip, sample_params)
from .errors import ConfigError, NumericError
from .grid import LatentGrid, VideoClip, pixel_unshuffle, shuffle_tensor
from .losses import (DEFAULT_LAMBDA_WARP, latent_loss, perceptual_loss, psnr,
                     temporal_loss, total_loss, warp_error_metric)
from .model import ModelConfig, ToyDiT, build_model, load_model, one_step_reconstruct, save_model
from .routing import DEFAULT_EPS, DEFAULT_RHO, AssignmentMap, profile_model, route_heads
from .util import np_rng

STAGE_S1 = "S1"
STAGE_S2 = "S2"
HISTORY_CAP = 512
TRST_MAGIC = b"TRST"


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: tuple = ((STAGE_S1, 150), (STAGE_S2, 150))
    batch_size: int = 2
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    lambda_warp: float = DEFAULT_LAMBDA_WARP
    rho: float = DEFAULT_RHO
    window: WindowSpec = field(default_factory=lambda: WindowSpec(3, 5, 5))
    kl_eps: float = DEFAULT_EPS
    perturb_p: float = DEFAULT_PERTURB_P
    calibration_count: int = 8
    reprofile_between_stages: bool = False
    motion_choices: tuple = (-2, -1, 0, 1, 2)

    def __post_init__(self):
        if isinstance(self.window, (list, tuple)):
            self.window = WindowSpec(*self.window)
        self.stages = tuple((str(s), int(n)) for s, n in self.stages)
        for stage, n in self.stages:
            if stage not in (STAGE_S1, STAGE_S2):
                raise ConfigError(f"unknown stage {stage!r}")
            if n <= 0:
                raise ConfigError(f"stage iteration count must be > 0, got {n}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch size must be > 0, got {self.batch_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = asdict(self.model)
        d["window"] = list(self.window.extents)
        d["stages"] = [list(s) for s in self.stages]
        d["motion_choices"] = list(self.motion_choices)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d["model"])
        d["stages"] = tuple(tuple(s) for s in d["stages"])
        d["motion_choices"] = tuple(d["motion_choices"])
        return TrainConfig(**d)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @staticmethod
    def init(params: dict) -> "AdamState":
        return AdamState(m={k: torch.zeros_like(p) for k, p in params.items()},
                         v={k: torch.zeros_like(p) for k, p in params.items()})


@dataclass
class TrainState:
    model: ToyDiT
    assignment: AssignmentMap
    opt: AdamState
    config: TrainConfig
    iteration: int = 0
    history: list = field(default_factory=list)  # rows: (iter, stage, lat, per, warp, total)

    def push_history(self, row) -> None:
        self.history.append(row)
        if len(self.history) > HISTORY_CAP:
            del self.history[0]


def backward(loss: torch.Tensor, params: dict) -> dict:
    """Reverse-mode gradients of a recorded scalar for every named parameter."""
    if loss.grad_fn is None:
        raise RuntimeError("loss has no recorded graph; run the forward with taping enabled")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(params[n]))
            for n, g in zip(names, grads)}


def adam_step(params: dict, grads: dict, opt: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> AdamState:
    """Bias-corrected Adam update in place; optional decoupled decay."""
    opt.step += 1
    bc1 = 1.0 - beta1 ** opt.step
    bc2 = 1.0 - beta2 ** opt.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != param {tuple(p.shape)} for {name}")
        m = opt.m[name]
        v = opt.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        update = (m / bc1) / ((v / bc2).sqrt() + eps)
        if weight_decay:
            p.data.add_(p.data, alpha=-lr * weight_decay)
        p.data.add_(update, alpha=-lr)
    return opt


def named_params(model: ToyDiT) -> dict:
    return dict(model.named_parameters())


# ---------------------------------------------------------------------------
# data and loss assembly


def make_sample(cfg: TrainConfig, stage: str, sample_seed: int):
    """One on-the-fly (HQ, LQ, flow) triple."""
    mc = cfg.model
    rng = np_rng(sample_seed, "sample")
    motion = (int(rng.choice(cfg.motion_choices)), int(rng.choice(cfg.motion_choices)))
    hq, flow = gen_clip("mixed", (mc.channels, mc.frames, mc.height, mc.width),
                        motion, seed=sample_seed)
    params = sample_params(rng)
    if stage == STAGE_S1:
        lq, _ = degrade_stage1(hq, params, seed=sample_seed)
    else:
        lq, _ = degrade_stage2(hq, params, cfg.perturb_p, seed=sample_seed)
    return hq, lq, flow


def sample_losses(model: ToyDiT, assignment, hq: VideoClip, lq: VideoClip,
                  flow: FlowField, r: int):
    """(latent, perceptual, warp) loss tensors for one clip."""
    z_l = pixel_unshuffle(lq, r)
    z_h = pixel_unshuffle(hq, r)
    z_hat = one_step_reconstruct(z_l, model, assignment)
    v_hat = shuffle_tensor(z_hat.data, r)
    lat = latent_loss(z_hat, z_h)
    per = perceptual_loss(v_hat, hq.data)
    wrp = temporal_loss(v_hat, flow)
    return lat, per, wrp


def calibration_clips(cfg: TrainConfig) -> list[VideoClip]:
    mc = cfg.model
    clips = []
    for i in range(cfg.calibration_count):
        rng = np_rng(cfg.seed, "calib", i)
        motion = (int(rng.choice(cfg.motion_choices)), int(rng.choice(cfg.motion_choices)))
        clip, _ = gen_clip("mixed", (mc.channels, mc.frames, mc.height, mc.width),
                           motion, seed=int(rng.integers(1 << 31)))
        clips.append(clip)
    return clips


def profile_for_training(model: ToyDiT, cfg: TrainConfig) -> AssignmentMap:
    return profile_model(model, calibration_clips(cfg), window_spec=cfg.window,
                         rho=cfg.rho, eps=cfg.kl_eps, calibration_seed=cfg.seed)


# ---------------------------------------------------------------------------
# the progressive loop


def train_step(state: TrainState, stage: str) -> tuple:
    """One optimizer step over a freshly generated batch; returns the loss row."""
    cfg = state.config
    params = named_params(state.model)
    lat_s = per_s = wrp_s = None
    for b in range(cfg.batch_size):
        sample_seed = np_rng(cfg.seed, "data", state.iteration, b).integers(1 << 31)
        hq, lq, flow = make_sample(cfg, stage, int(sample_seed))
        lat, per, wrp = sample_losses(state.model, state.assignment, hq, lq, flow, cfg.model.r)
        lat_s = lat if lat_s is None else lat_s + lat
        per_s = per if per_s is None else per_s + per
        wrp_s = wrp if wrp_s is None else wrp_s + wrp
    lat_m = lat_s / cfg.batch_size
    per_m = per_s / cfg.batch_size
    wrp_m = wrp_s / cfg.batch_size
    loss = lat_m + per_m + cfg.lambda_warp * wrp_m
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at iteration {state.iteration}")
    grads = backward(loss, params)
    adam_step(params, grads, state.opt, cfg.lr, cfg.beta1, cfg.beta2,
              cfg.adam_eps, cfg.weight_decay)
    report = total_loss((lat_m, per_m, wrp_m), cfg.lambda_warp)
    row = (state.iteration, stage, report.latent, report.perceptual, report.warp, report.total)
    state.push_history(row)
    state.iteration += 1
    return row


def init_train_state(cfg: TrainConfig) -> TrainState:
    model = build_model(cfg.model, seed=cfg.seed)
    assignment = profile_for_training(model, cfg)
    return TrainState(model=model, assignment=assignment,
                      opt=AdamState.init(named_params(model)), config=cfg)


def train_progressive(cfg: TrainConfig, state: TrainState | None = None,
                      out_dir=None, checkpoint_every: int = 0,
                      log_every: int = 0, stop_after: int | None = None) -> TrainState:
    """Run the staged schedule; resumes mid-schedule from `state` if given.

    Routing is profiled once on the initialized model and frozen; the
    reprofile flag re-runs it at each later stage boundary. `stop_after`
    pauses the schedule at a global iteration count (for resume tests).
    """
    if state is None:
        state = init_train_state(cfg)
    else:
        state.config = cfg
    boundaries = []
    start = 0
    for stage, n in cfg.stages:
        boundaries.append((stage, start, start + n))
        start += n
    total_iters = start if stop_after is None else min(start, stop_after)
    if state.iteration >= total_iters:
        return state
    out = pathlib.Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        for stage, lo, hi in boundaries:
            hi = min(hi, total_iters)
            if state.iteration >= hi:
                continue
            if state.iteration == lo and lo > 0 and cfg.reprofile_between_stages:
                state.assignment = profile_for_training(state.model, cfg)
            while state.iteration < hi:
                row = train_step(state, stage)
                if log_every and row[0] % log_every == 0:
                    print(f"iter {row[0]:5d} [{stage}] total {row[5]:.5f} "
                          f"(lat {row[2]:.5f} per {row[3]:.5f} warp {row[4]:.5f})")
                if out is not None and checkpoint_every and state.iteration % checkpoint_every == 0:
                    save_train_state(out / f"ckpt_{state.iteration:06d}.odit", state)
    except NumericError:
        if out is not None:
            save_train_state(out / "diagnostic_abort.odit", state)
        raise
    if out is not None:
        save_train_state(out / "final.odit", state)
        write_history_csv(out / "loss_history.csv", state.history)
    return state


def smoothed_total(history: list, window: int = 20, tail: bool = True) -> float:
    rows = history[-window:] if tail else history[:window]
    return float(np.mean([r[5] for r in rows]))


def write_history_csv(path, history: list) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["iteration", "stage", "latent", "perceptual", "warp", "total"])
        for row in history:
            wr.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4]), repr(row[5])])


# ---------------------------------------------------------------------------
# checkpointing: ODIT payload plus a TRST extension block


def save_train_state(path, state: TrainState) -> None:
    meta = {
        "iteration": state.iteration,
        "config": state.config.to_dict(),
        "history": [list(r) for r in state.history],
    }
    meta_bytes = json.dumps(meta).encode()
    blobs = [TRST_MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes]
    for name, _ in state.model.named_parameters():
        blobs.append(state.opt.m[name].detach().to(torch.float32).numpy().astype("<f4").tobytes())
        blobs.append(state.opt.v[name].detach().to(torch.float32).numpy().astype("<f4").tobytes())
    blobs.append(struct.pack("<Q", state.opt.step))
    save_model(path, state.model, extra=b"".join(blobs))
    state.assignment.save(str(path) + ".assignment.json")


def load_train_state(path) -> TrainState:
    model, extra = load_model(path)
    if extra[:4] != TRST_MAGIC:
        raise ConfigError("checkpoint has no training extension block")
    (meta_len,) = struct.unpack("<I", extra[4:8])
    meta = json.loads(extra[8:8 + meta_len].decode())
    cfg = TrainConfig.from_dict(meta["config"])
    pos = 8 + meta_len
    opt = AdamState.init(dict(model.named_parameters()))
    for name, p in model.named_parameters():
        n = p.numel()
        for slot in (opt.m, opt.v):
            arr = np.frombuffer(extra, dtype="<f4", count=n, offset=pos).reshape(tuple(p.shape))
            slot[name] = torch.from_numpy(arr.copy())
            pos += 4 * n
    (opt.step,) = struct.unpack("<Q", extra[pos:pos + 8])
    assignment = AssignmentMap.load(str(path) + ".assignment.json")
    return TrainState(model=model, assignment=assignment, opt=opt, config=cfg,
                      iteration=meta["iteration"],
                      history=[tuple(r) for r in meta["history"]])


# ---------------------------------------------------------------------------
# evaluation


def heldout_set(cfg: TrainConfig, count: int = 4, seed_tag: str = "heldout"):
    """Seeded eval triples disjoint from the training stream."""
    triples = []
    for i in range(count):
        sample_seed = int(np_rng(cfg.seed, seed_tag, i).integers(1 << 31))
        triples.append(make_sample(cfg, STAGE_S2, sample_seed))
    return triples


def evaluate_model(model: ToyDiT, assignment, triples, lambda_warp: float,
                   r: int) -> list[dict]:
    """Per-clip metric rows for (hq, lq, flow) triples."""
    rows = []
    with torch.no_grad():
        for i, (hq, lq, flow) in enumerate(triples):
            z_l = pixel_unshuffle(lq, r)
            z_hat = one_step_reconstruct(z_l, model, assignment)
            v_hat = shuffle_tensor(z_hat.data, r).clamp(0.0, 1.0)
            lat = latent_loss(z_hat.data.clamp(0.0, 1.0), pixel_unshuffle(hq, r).data)
            per = perceptual_loss(v_hat, hq.data)
            wrp = temporal_loss(v_hat, flow)
            rep = total_loss((lat, per, wrp), lambda_warp)
            rows.append({
                "clip_id": i,
                "psnr": psnr(v_hat, hq.data),
                "warp_error": warp_error_metric(v_hat, flow),
                "latent": rep.latent, "perceptual": rep.perceptual,
                "warp": rep.warp, "total": rep.total,
            })
    return rows


def baseline_psnr(triples, factor: int = 2) -> float:
    vals = [psnr(downup_baseline(lq, factor), hq.data) for hq, lq, _ in triples]
    return float(np.mean(vals))


def mean_psnr(rows: list[dict]) -> float:
    return float(np.mean([r["psnr"] for r in rows]))
