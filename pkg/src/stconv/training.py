"""Objectives, AdamW, the plateau learning-rate rule and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ad
from .metrics import MetricsRecord, binarize_and_score, mean_iou
from .model import ModelConfig, ParamStore, build, forward, save_checkpoint
from .tensor import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "val_loss", "val_miou", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pos_weight: float = 4.0
    alpha: float = 0.2
    batch_size: int = 4
    epochs: int = 10
    plateau_factor: float = 0.9
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if not 0.5 <= self.threshold <= 0.6:
            raise ValueError(f"threshold must lie in [0.5, 0.6], got {self.threshold}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


def _check_targets(logits, y):
    if logits.shape != y.shape:
        raise ShapeError(f"logits shape {logits.shape} does not match target shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be binary (0 or 1)")


def bce_loss(logits, y, pos_weight: float = 1.0, tape=None):
    """Mean pos-weighted binary cross-entropy on logits.

    Returns a float for array input, or a scalar Var when ``logits`` is a Var.
    """
    z = logits if isinstance(logits, ad.Var) else ad.Var(np.asarray(logits, dtype=np.float64))
    y = np.asarray(y)
    _check_targets(z.data, y)
    out = ad.bce_with_logits(z, y, pos_weight, tape)
    return out if isinstance(logits, ad.Var) else float(out.data)


def total_loss(y_final, y_early, y, alpha: float = 0.2, pos_weight: float = 1.0, tape=None):
    """bce(y_final) + alpha * bce(y_early)."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if not isinstance(y_final, ad.Var):
        return bce_loss(y_final, y, pos_weight) + alpha * bce_loss(y_early, y, pos_weight)
    if y_final.shape != y_early.shape:
        raise ShapeError(f"head shapes differ: {y_final.shape} vs {y_early.shape}")
    lf = bce_loss(y_final, y, pos_weight, tape)
    if y_early is y_final:
        return ad.scale(lf, 1.0 + alpha, tape)
    le = bce_loss(y_early, y, pos_weight, tape)
    return ad.linear_combination([(1.0, lf), (alpha, le)], tape)


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params, grads, state: AdamWState, cfg: TrainConfig, step_index: int, lr: float | None = None):
    """One in-place AdamW update; ``step_index`` counts from 1.

    Weight decay is decoupled: parameters shrink by ``1 - lr*wd`` before the
    bias-corrected Adam step is applied.
    """
    if step_index <= state.step:
        raise ValueError(f"step_index {step_index} does not advance past {state.step}")
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1**step_index
    c2 = 1 - b2**step_index
    for name, g in grads:
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if cfg.weight_decay:
            p *= p.dtype.type(1 - lr * cfg.weight_decay)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype, copy=False)
    state.step = step_index
    return state


def plateau_schedule(prev_val_loss, curr_val_loss, lr: float, factor: float = 0.9) -> float:
    """Shrink the learning rate when validation loss got strictly worse."""
    if prev_val_loss is None:
        return lr
    if not (np.isfinite(prev_val_loss) and np.isfinite(curr_val_loss)):
        raise NonFiniteError("validation losses must be finite")
    return lr * factor if curr_val_loss > prev_val_loss else lr


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_miou: float
    lr: float


@dataclass
class TrainResult:
    params: ParamStore
    best_params: ParamStore
    history: list
    best_epoch: int

    def log_csv(self) -> str:
        return format_log(self.history)


def format_log(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for e in history:
        w.writerow([e.epoch, repr(float(e.train_loss)), repr(float(e.val_loss)), repr(float(e.val_miou)),
                    repr(float(e.lr))])
    return buf.getvalue()


def evaluate(params, model_cfg: ModelConfig, X, Y, train_cfg: TrainConfig, batch_size: int = 8):
    """Eval-mode total loss (averaged over batches by sample count) and pooled metrics."""
    p = params.as_vars(requires_grad=False)
    record = MetricsRecord(0, 0, 0, 0)
    loss_sum = 0.0
    for i in range(0, len(X), batch_size):
        xb, yb = X[i:i + batch_size], Y[i:i + batch_size]
        y_early, y_final = forward(xb, p, model_cfg, "eval")
        loss = total_loss(y_final.data.astype(np.float64), y_early.data.astype(np.float64), yb,
                          train_cfg.alpha, train_cfg.pos_weight)
        loss_sum += loss * len(xb)
        record = record + binarize_and_score(y_final.data, yb, train_cfg.threshold)
    return loss_sum / len(X), record


def _check_data(model_cfg, X, Y, what):
    model_cfg.check_input(X.shape)
    expected = model_cfg.output_shape(X.shape)
    if Y.shape != expected:
        raise ShapeError(f"{what} targets: expected shape {expected}, got {Y.shape}")


def train_step(params: ParamStore, model_cfg, train_cfg, xb, yb, state, step, lr, dropout_seed):
    p = params.as_vars(requires_grad=True)
    tape = ad.Tape()
    y_early, y_final = forward(xb, p, model_cfg, "train", dropout_seed, tape)
    loss = total_loss(y_final, y_early, yb, train_cfg.alpha, train_cfg.pos_weight, tape)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite training loss {value} at step {step}")
    ad.backward(tape, loss)
    params.zero_grad()
    params.collect_grads(p)
    adamw_step(params, params.grads(), state, train_cfg, step, lr)
    return value


def train_loop(model_cfg: ModelConfig, train_data, val_data, train_cfg: TrainConfig, out_dir=None,
               params: ParamStore | None = None) -> TrainResult:
    """Fit the model; with ``out_dir``, write ``model.star`` (best val loss) and ``log.csv``.

    Fully deterministic given ``train_cfg.seed``.
    """
    X, Y = (np.asarray(a, dtype=model_cfg.np_dtype) for a in train_data)
    Xv, Yv = (np.asarray(a, dtype=model_cfg.np_dtype) for a in val_data)
    _check_data(model_cfg, X, Y, "train")
    _check_data(model_cfg, Xv, Yv, "validation")
    for arr in (Y, Yv):
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("targets must be binary (0 or 1)")

    params = build(model_cfg, train_cfg.seed) if params is None else params
    best = ParamStore(params.state_dict())
    state = AdamWState()
    order_rng = np.random.default_rng([train_cfg.seed, 1])
    lr = train_cfg.lr
    history: list[EpochLog] = []
    prev_val = None
    best_val, best_epoch = np.inf, 0
    step = 0
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(X))
        losses, counts = [], []
        for i in range(0, len(X), train_cfg.batch_size):
            idx = np.sort(order[i:i + train_cfg.batch_size])
            step += 1
            value = train_step(params, model_cfg, train_cfg, X[idx], Y[idx], state, step, lr,
                               [train_cfg.seed, 2, step])
            losses.append(value)
            counts.append(len(idx))
        train_loss = float(np.average(losses, weights=counts))
        val_loss, record = evaluate(params, model_cfg, Xv, Yv, train_cfg)
        if not np.isfinite(val_loss):
            raise NonFiniteError(f"non-finite validation loss at epoch {epoch}")
        val_miou = mean_iou([record])
        history.append(EpochLog(epoch, train_loss, val_loss, val_miou, lr))
        logger.info("epoch %d train_loss %.5f val_loss %.5f val_miou %.4f lr %.3g (%.1fs)",
                    epoch, train_loss, val_loss, val_miou, lr, time.perf_counter() - t0)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best = ParamStore(params.state_dict())
        lr = plateau_schedule(prev_val, val_loss, lr, train_cfg.plateau_factor)
        prev_val = val_loss

    result = TrainResult(params, best, history, best_epoch)
    if out_dir is not None:
        from .config import train_config_dict

        save_checkpoint(out_dir / "model.star", best, model_cfg, train_config_dict(train_cfg))
        (out_dir / "log.csv").write_text(result.log_csv(), encoding="utf-8")
    return result
