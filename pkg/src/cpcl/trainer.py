"""Cyclic prototype consistency training: losses, optimizer, EMA teacher and the loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Batch, VolumeSample, sample_batch, step_generators
from .errors import NumericalError, ShapeError, ValidationError
from .proto import hard_mask, masked_average_pool, one_hot, proto_predict
from .segnet import ModelState, UNetConfig, forward, init_weights, load_checkpoint, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("supervised", "mt", "fpcl", "bpcl", "cpcl", "mt_fpcl", "mt_bpcl", "mt_cpcl")
CE_CLAMP = 1e-7
DICE_EPS = 1e-5
NOISE_CLIP = 0.2


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    labeled_per_batch: int = 2
    unlabeled_per_batch: int = 2
    t_max: int = 2000
    w_max: float = 0.1
    ema_decay: float = 0.99
    alpha_scale: float = 20.0
    beta: float = 10.0
    patch: int = 24
    mode: str = "cpcl"
    noise_sigma: float = 0.1
    seed: int = 0
    val_every: int = 100
    ckpt_every: int = 500

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        for f in ("lr0", "labeled_per_batch", "t_max", "alpha_scale", "patch"):
            if not getattr(self, f) > 0:
                raise ValidationError(f"{f} must be positive")
        for f in ("momentum", "weight_decay", "w_max", "ema_decay", "beta", "noise_sigma",
                  "unlabeled_per_batch", "seed", "val_every", "ckpt_every"):
            if getattr(self, f) < 0:
                raise ValidationError(f"{f} must be non-negative")

    @property
    def uses_unlabeled(self) -> bool:
        return self.mode != "supervised"

    @property
    def uses_mt(self) -> bool:
        return self.mode.startswith("mt")

    @property
    def uses_fpc(self) -> bool:
        return self.mode in ("fpcl", "cpcl", "mt_fpcl", "mt_cpcl")

    @property
    def uses_bpc(self) -> bool:
        return self.mode in ("bpcl", "cpcl", "mt_bpcl", "mt_cpcl")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class StepReport:
    step: int
    lr: float
    lam: float
    loss_s: float
    loss_fpc: float
    loss_bpc: float
    loss_mt: float
    loss_total: float
    wall_ms: float

    def to_record(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# schedules and optimizer
# ---------------------------------------------------------------------------

def rampup_weight(t: int, t_max: int, w_max: float) -> float:
    """Gaussian ramp-up ``w_max * exp(-5 (1 - t/t_max)^2)``; held at ``w_max`` past ``t_max``."""
    if t >= t_max:
        return float(w_max)
    frac = 1.0 - max(t, 0) / t_max
    return float(w_max * math.exp(-5.0 * frac * frac))


def poly_lr(t: int, t_max: int, lr0: float, power: float = 0.9) -> float:
    return float(lr0 * max(0.0, 1.0 - t / t_max) ** power)


def sgd_update(params: Mapping[str, Tensor], buffers: dict[str, np.ndarray], lr: float,
               momentum: float, weight_decay: float) -> None:
    """Heavy-ball SGD with L2 decay folded into the gradient; clears ``.grad``."""
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        g = g + np.float32(weight_decay) * p.data
        v = np.float32(momentum) * buffers[name] + g
        buffers[name] = v.astype(p.dtype)
        p.data = (p.data - np.float32(lr) * v).astype(p.dtype)
        p.grad = None


def ema_update(teacher: Mapping[str, Tensor], student: Mapping[str, Tensor],
               decay: float) -> None:
    if list(teacher) != list(student):
        raise ValidationError("teacher and student parameter names differ")
    d = np.float32(decay)
    for name, tp in teacher.items():
        sp = student[name]
        if tp.shape != sp.shape:
            raise ShapeError(f"{name}: teacher {tp.shape} vs student {sp.shape}")
        tp.data = (d * tp.data + (np.float32(1.0) - d) * sp.data).astype(tp.dtype)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_probs(p: Tensor, what: str) -> None:
    if p.ndim < 2 or p.shape[1] != 2:
        raise ShapeError(f"{what}: expected [K,2,...] probabilities, got {p.shape}")
    s = p.data.sum(axis=1)
    if not np.all(np.abs(s - 1) <= 1e-4) or (p.data < 0).any():
        raise ValidationError(f"{what}: channel sums must equal 1")


def _check_mask(y: np.ndarray, p: Tensor) -> np.ndarray:
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if y.shape != (p.shape[0],) + p.shape[2:]:
        raise ShapeError(f"mask {y.shape} does not match probabilities {p.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("mask must be binary")
    return y


def _log_p_true(probs: Tensor, y: np.ndarray) -> Tensor:
    onehot = one_hot(y, probs.dtype)
    node = probs.node
    if node is not None and node.op == "softmax":
        # Straight from the logits: a clamped probability has zero gradient, which
        # lets saturated foreground voxels drop out of the loss for good.
        log_p = T.tsum(T.mul(T.log_softmax(node.inputs[0], axis=1), onehot), axis=1)
        return T.clamp(log_p, math.log(CE_CLAMP), 0.0, passthrough=True)
    p_true = T.tsum(T.mul(probs, onehot), axis=1)
    return T.log(T.clamp(p_true, CE_CLAMP, 1.0))


def cross_entropy(probs: Tensor, y) -> Tensor:
    """Mean voxelwise ``-log P(true class)`` with probabilities clamped to [1e-7, 1]."""
    y = _check_mask(y, probs)
    return T.mean(T.mul(_log_p_true(probs, y), -1.0))


def dice_loss(probs: Tensor, y) -> Tensor:
    y = _check_mask(y, probs)
    p_fg = probs[:, 1]
    yf = y.astype(probs.dtype)
    inter = T.tsum(T.mul(p_fg, yf))
    denom = T.add(T.tsum(p_fg), float(yf.sum()) + DICE_EPS)
    return T.sub(1.0, T.div(T.add(T.mul(inter, 2.0), DICE_EPS), denom))


def supervised_loss(probs: Tensor, y) -> Tensor:
    _check_probs(probs, "supervised_loss")
    return T.add(T.mul(cross_entropy(probs, y), 0.5), T.mul(dice_loss(probs, y), 0.5))


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = T.sub(a, b)
    return T.mean(T.mul(d, d))


def forward_consistency_loss(p_l2u: Tensor, p_u: Tensor) -> Tensor:
    return mse(p_l2u, T.detach(p_u))


def backward_consistency_loss(y_l, p_u2l: Tensor) -> Tensor:
    if p_u2l.shape[0] != np.shape(y_l)[0] or p_u2l.shape[2:] != np.shape(y_l)[1:]:
        raise ShapeError(f"labels {np.shape(y_l)} vs probabilities {p_u2l.shape}")
    return cross_entropy(p_u2l, y_l)


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

def _noisy(x: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    xi = np.clip(rng.normal(0.0, sigma, size=x.shape), -NOISE_CLIP, NOISE_CLIP)
    return (x + xi).astype(np.float32)


def compute_losses(state: ModelState, batch: Batch, cfg: TrainConfig, lam: float,
                   noise_rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Build every loss term for one batch; teacher outputs never enter the tape."""
    net = state.config
    zero = Tensor(np.zeros((), dtype=np.float32))
    out = {"fpc": zero, "bpc": zero, "mt": zero}
    feat_l, _, p_l = forward(net, state.student, Tensor(batch.x_l))
    _abort_if_nonfinite({"F_l": feat_l, "P_l": p_l}, state.step)
    out["s"] = supervised_loss(p_l, batch.y_l)
    out["F_l"], out["P_l"] = feat_l, p_l
    if cfg.uses_unlabeled:
        dims = batch.x_l.shape[2:]
        x_u = batch.x_u
        if cfg.uses_mt:
            noise_rng = noise_rng or np.random.default_rng(0)
            x_student = _noisy(x_u, noise_rng, cfg.noise_sigma)
            x_u = _noisy(x_u, noise_rng, cfg.noise_sigma)
        with T.no_grad():
            feat_u, _, p_u = forward(net, state.teacher, Tensor(x_u))
        feat_u, p_u = T.detach(feat_u), T.detach(p_u)
        if cfg.uses_mt:
            _, _, p_su = forward(net, state.student, Tensor(x_student))
            out["mt"] = mse(p_su, p_u)
        if cfg.uses_fpc:
            protos_l = masked_average_pool(feat_l, batch.y_l)
            out["P_l2u"] = proto_predict(feat_u, protos_l, cfg.alpha_scale, dims)
            out["fpc"] = forward_consistency_loss(out["P_l2u"], p_u)
        if cfg.uses_bpc:
            y_u = hard_mask(p_u)
            protos_u = masked_average_pool(feat_u, y_u)
            out["P_u2l"] = proto_predict(feat_l, protos_u, cfg.alpha_scale, dims)
            out["bpc"] = backward_consistency_loss(batch.y_l, out["P_u2l"])
        out["F_u"], out["P_u"] = feat_u, p_u
    consistency = T.add(T.add(out["mt"], out["fpc"]), T.mul(out["bpc"], float(cfg.beta)))
    out["c"] = consistency
    out["total"] = T.add(out["s"], T.mul(consistency, float(lam)))
    return out


def _abort_if_nonfinite(losses: Mapping[str, Tensor], step: int) -> None:
    order = ["F_l", "P_l", "F_u", "P_u", "P_l2u", "P_u2l", "s", "fpc", "bpc", "mt", "total"]
    bad = T.first_nonfinite((k, losses[k]) for k in order if k in losses)
    if bad is not None:
        raise NumericalError(f"step {step}: non-finite values in {bad}")


def train_step(state: ModelState, batch: Batch, cfg: TrainConfig,
               noise_rng: np.random.Generator | None = None) -> StepReport:
    """One optimizer step on the student followed by the EMA teacher update."""
    if batch.x_l.shape[0] != cfg.labeled_per_batch:
        raise ValidationError("labeled batch size does not match the config")
    if cfg.uses_unlabeled and (batch.x_u is None or batch.x_u.shape[0] != cfg.unlabeled_per_batch):
        raise ValidationError("unlabeled batch size does not match the config")
    t0 = time.perf_counter()
    t = state.step
    lam = rampup_weight(t, cfg.t_max, cfg.w_max)
    lr = poly_lr(t, cfg.t_max, cfg.lr0)
    losses = compute_losses(state, batch, cfg, lam, noise_rng)
    _abort_if_nonfinite(losses, t)
    T.backward(losses["total"])
    sgd_update(state.student, state.momentum, lr, cfg.momentum, cfg.weight_decay)
    ema_update(state.teacher, state.student, cfg.ema_decay)
    bad = T.first_nonfinite(state.student.items())
    if bad is not None:
        raise NumericalError(f"step {t}: parameter {bad} became non-finite")
    state.step = t + 1
    return StepReport(
        step=t, lr=lr, lam=lam,
        loss_s=losses["s"].item(), loss_fpc=losses["fpc"].item(),
        loss_bpc=losses["bpc"].item(), loss_mt=losses["mt"].item(),
        loss_total=losses["total"].item(),
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


def next_batch(state: ModelState, cfg: TrainConfig, labeled: Sequence[VolumeSample],
               unlabeled: Sequence[VolumeSample]) -> tuple[Batch, np.random.Generator]:
    """Draw the batch for ``state.step`` and advance the RNG chain."""
    rng_l, rng_u, rng_noise, nxt = step_generators(state.rng_state)
    batch = sample_batch(labeled, unlabeled, rng_l, rng_u, cfg.labeled_per_batch,
                         cfg.unlabeled_per_batch, cfg.patch, use_unlabeled=cfg.uses_unlabeled)
    state.rng_state = nxt
    return batch, rng_noise


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    state: ModelState
    reports: list[StepReport]
    val_dice: list[tuple[int, float]]
    checkpoint: Path | None


def run_training(cfg: TrainConfig, labeled: Sequence[VolumeSample],
                 unlabeled: Sequence[VolumeSample], out_dir=None,
                 val: Sequence[VolumeSample] = (), state: ModelState | None = None,
                 resume=None, net: UNetConfig | None = None,
                 stop_at: int | None = None) -> TrainResult:
    """Seeded, resumable training loop.

    Writes ``steps.jsonl`` (one StepReport per step), ``val.jsonl``, periodic
    ``step_XXXXXX.cpck`` checkpoints and ``final.cpck`` when ``out_dir`` is given.
    ``stop_at`` ends the loop early (the schedule still uses ``cfg.t_max``).
    """
    from .evaluation import mean_val_dice

    if resume is not None:
        state = load_checkpoint(resume, net)
    elif state is None:
        state = init_weights(net or UNetConfig(), cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    step_log = val_log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        step_log = open(out / "steps.jsonl", mode, encoding="utf-8")
        val_log = open(out / "val.jsonl", mode, encoding="utf-8")
    reports: list[StepReport] = []
    val_dice: list[tuple[int, float]] = []
    end = cfg.t_max if stop_at is None else min(stop_at, cfg.t_max)
    final = None
    try:
        while state.step < end:
            batch, noise_rng = next_batch(state, cfg, labeled, unlabeled)
            rep = train_step(state, batch, cfg, noise_rng)
            reports.append(rep)
            if step_log is not None:
                step_log.write(json.dumps(rep.to_record()) + "\n")
            done = state.step
            if val and cfg.val_every and (done % cfg.val_every == 0 or done == cfg.t_max):
                score = mean_val_dice(state, val, cfg.patch)
                val_dice.append((done, score))
                log.info("step %d  loss %.4f  val dice %.4f", done, rep.loss_total, score)
                if val_log is not None:
                    val_log.write(json.dumps({"step": done, "val_dice": score}) + "\n")
                    val_log.flush()
            if out is not None and cfg.ckpt_every and done % cfg.ckpt_every == 0:
                save_checkpoint(state, out / f"step_{done:06d}.cpck")
        if out is not None:
            final = out / "final.cpck"
            save_checkpoint(state, final)
    except OSError as exc:
        raise OSError(exc.errno, f"{exc.strerror} (while writing to {out})", exc.filename) from exc
    finally:
        for fh in (step_log, val_log):
            if fh is not None:
                fh.close()
    return TrainResult(state, reports, val_dice, final)
