"""Training: reverse-mode gradients, Adam with cosine decay, cross-entropy,
and the stop-gradient SRR regularizer in its three selection modes.

The regularizer adds eta times the mean of selected per-layer measures,
each evaluated on the layer's output recomputed from a *detached* copy of
its input (same dropout masks), so term l's gradient reaches only layer
l's parameters.  The l0 part of the measure contributes its value but no
gradient (it is piecewise constant).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError
from .linalg import rng_for
from .model import Model
from .rates import sparsity_l0

__all__ = [
    "TrainConfig",
    "EpochStats",
    "TrainingTrace",
    "TRACE_COLUMNS",
    "gradients",
    "srr_regularized_loss",
    "train",
    "Adam",
    "schedule_lr",
    "evaluate",
]

REG_MODES = ("none", "all_layers", "fixed_layer", "random_layer")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr_init: float = 1e-4
    epochs: int = 200
    schedule: str = "cosine"
    eta_reg: float = 0.0
    reg_mode: str = "none"
    reg_layer: int | None = None  # 1-based, fixed_layer mode only
    stop_criterion: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.reg_mode not in REG_MODES:
            raise ConfigError(f"unknown reg_mode {self.reg_mode!r}")
        if self.eta_reg < 0:
            raise ConfigError("eta_reg must be nonnegative")
        # eta_reg == 0 exactly when regularization is off
        if (self.eta_reg == 0) != (self.reg_mode == "none"):
            raise ConfigError("eta_reg must be 0 exactly when reg_mode is 'none'")
        if self.reg_mode == "fixed_layer" and (self.reg_layer is None or self.reg_layer < 1):
            raise ConfigError("fixed_layer mode needs reg_layer >= 1")


def schedule_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "constant" or cfg.epochs == 1:
        return cfg.lr_init
    return cfg.lr_init * (1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1))) / 2.0


def gradients(loss: Tensor, params: dict[str, Tensor], layer_outputs=None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss for the given parameters.

    Parameters untouched by the loss get zero gradients.  A non-finite
    loss raises, attributing the first bad layer when a cache of layer
    outputs is supplied.
    """
    if not np.isfinite(loss.data).all():
        msg = "loss is not finite"
        if layer_outputs:
            for i, entry in enumerate(layer_outputs):
                out = entry["output"]
                val = out.data if isinstance(out, Tensor) else out
                if not np.isfinite(val).all():
                    msg += f" (first non-finite activation at layer {i + 1})"
                    break
        raise NumericError(msg)
    for t in params.values():
        t.grad = None
    loss.backward()
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }


def _layer_srr_value_and_term(model: Model, i: int, cache_entry) -> tuple[Tensor, float]:
    """Regularizer term for layer i (0-based): lambda*l0 + R_c - R on the
    layer output recomputed from the detached cached input."""
    zin = cache_entry["input"]
    zdet = zin.detach() if isinstance(zin, Tensor) else Tensor(np.asarray(zin))
    zout = model.apply_layer(i, zdet, cache_entry["attn_masks"], cache_entry["out_mask"])
    cfg = model.cfg
    gamma = cfg.attention_gamma(zout.shape[-1])
    U = model.params[f"layers.{i}.U"]
    p = cfg.p
    rc = None
    for k in range(cfg.K):
        A = U[:, k * p : (k + 1) * p].mT @ zout
        term = ad.logdet_gram(A, gamma)
        rc = term if rc is None else rc + term
    r = ad.logdet_gram(zout, cfg.K * gamma)
    diff = rc - r
    if diff.data.ndim:
        diff = diff.mean()
    zval = zout.data
    if zval.ndim == 2:
        l0 = float(sparsity_l0(zval))
    else:
        l0 = float(np.mean([sparsity_l0(zval[b]) for b in range(zval.shape[0])]))
    term = diff + cfg.lambda_sparsity * l0
    return term, l0


def srr_regularized_loss(model: Model, batch, train_cfg: TrainConfig, rng=None):
    """Cross-entropy plus eta times the mean of selected per-layer measures.

    ``batch`` is (features, labels) with features (B, F, T).  Returns the
    scalar loss tensor and a dict with the CE value, batch accuracy, the
    regularizer value (before eta), the selected layers, and the layer
    cache (for divergence attribution).
    """
    x, y = batch
    y = np.asarray(y)
    train_mode = True
    tokens = model.embed_inputs(np.asarray(x, dtype=np.float64), traced=True, train_mode=train_mode, rng=rng)
    need_cache = train_cfg.reg_mode != "none"
    logits, _, cache = model.run(tokens, train_mode=train_mode, rng=rng, keep_cache=True)
    ce = ad.softmax_cross_entropy(logits, y)
    acc = float(np.mean(np.argmax(logits.data, axis=-1) == y))

    selected: list[int] = []
    reg_value = 0.0
    loss = ce
    if need_cache:
        L = model.cfg.L
        if train_cfg.reg_mode == "all_layers":
            selected = list(range(1, L + 1))
        elif train_cfg.reg_mode == "fixed_layer":
            if train_cfg.reg_layer > L:
                raise ConfigError(f"reg_layer {train_cfg.reg_layer} exceeds depth {L}")
            selected = [train_cfg.reg_layer]
        else:  # random_layer
            if rng is None:
                raise ConfigError("random_layer mode needs an rng")
            selected = [int(rng.integers(1, L + 1))]
        total = None
        for layer_no in selected:
            term, _ = _layer_srr_value_and_term(model, layer_no - 1, cache[layer_no - 1])
            total = term if total is None else total + term
        mean_term = total * (1.0 / len(selected))
        reg_value = mean_term.item()
        loss = ce + train_cfg.eta_reg * mean_term

    parts = {
        "ce": ce.item(),
        "acc": acc,
        "reg_value": reg_value,
        "selected_layers": selected,
        "cache": cache,
    }
    return loss, parts


class Adam:
    """Adam with bias correction; the learning rate is passed per step so a
    schedule can drive it."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cross_entropy_np(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(labels)), labels]
    return float(np.mean(lse - picked))


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch: int = 256) -> tuple[float, float]:
    """Plain-inference CE and accuracy over a dataset split."""
    ce_sum = 0.0
    hit_sum = 0.0
    n = len(y)
    for start in range(0, n, batch):
        xb = np.asarray(x[start : start + batch], dtype=np.float64)
        yb = np.asarray(y[start : start + batch])
        tokens = model.embed_inputs(xb)
        logits, _, _ = model.run(tokens)
        ce_sum += cross_entropy_np(logits, yb) * len(yb)
        hit_sum += float(np.sum(np.argmax(logits, axis=-1) == yb))
    return ce_sum / n, hit_sum / n


@dataclass
class EpochStats:
    epoch: int
    train_ce: float
    train_acc: float
    val_ce: float
    val_acc: float
    lr: float
    wall_time: float
    reg_value: float = 0.0


TRACE_COLUMNS = ("epoch", "train_ce", "train_acc", "val_ce", "val_acc", "lr", "wall_time", "reg_value")


@dataclass
class TrainingTrace:
    epochs: list[EpochStats] = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    stopped_epoch: int | None = None
    note: str = ""

    def final_train_ce(self) -> float:
        return self.epochs[-1].train_ce if self.epochs else float("nan")

    def to_csv_text(self) -> str:
        lines = [",".join(TRACE_COLUMNS)]
        for e in self.epochs:
            lines.append(
                ",".join(
                    [
                        str(e.epoch),
                        repr(e.train_ce),
                        repr(e.train_acc),
                        repr(e.val_ce),
                        repr(e.val_acc),
                        repr(e.lr),
                        repr(e.wall_time),
                        repr(e.reg_value),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv_text())


def train(model: Model, dataset, cfg: TrainConfig, trace_path: str | None = None) -> TrainingTrace:
    """Run the optimization loop until the CE stop criterion or the epoch
    budget; divergence is flagged in the trace, not raised.

    ``dataset`` needs train_x/train_y/val_x/val_y attributes; the trace is
    appended to ``trace_path`` epoch by epoch when given.
    """
    if cfg.reg_mode == "fixed_layer" and cfg.reg_layer > model.cfg.L:
        raise ConfigError(f"reg_layer {cfg.reg_layer} exceeds model depth {model.cfg.L}")
    n = dataset.n_train
    if n == 0:
        raise ConfigError("empty training set")
    adam = Adam(model.trainable_params())
    trace = TrainingTrace()
    if trace_path:
        with open(trace_path, "w") as fh:
            fh.write(",".join(TRACE_COLUMNS) + "\n")

    for epoch in range(cfg.epochs):
        t_start = time.perf_counter()
        lr = schedule_lr(cfg, epoch)
        perm = rng_for(cfg.seed, "shuffle", epoch).permutation(n)
        ce_sum = acc_sum = reg_sum = 0.0
        seen = 0
        bad = None
        for bno, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            step_rng = rng_for(cfg.seed, "step", epoch, bno)
            xb, yb = dataset.train_batch(idx, step_rng)
            loss, parts = srr_regularized_loss(model, (xb, yb), cfg, rng=step_rng)
            if not np.isfinite(loss.data).all():
                bad = _nonfinite_note(parts["cache"], epoch, bno)
                break
            grads = gradients(loss, model.trainable_params(), layer_outputs=parts["cache"])
            adam.step(grads, lr)
            bsz = len(idx)
            ce_sum += parts["ce"] * bsz
            acc_sum += parts["acc"] * bsz
            reg_sum += parts["reg_value"] * bsz
            seen += bsz
        if bad is not None:
            trace.diverged = True
            trace.note = bad
            break
        val_ce, val_acc = evaluate(model, dataset.val_x, dataset.val_y)
        stats = EpochStats(
            epoch=epoch,
            train_ce=ce_sum / seen,
            train_acc=acc_sum / seen,
            val_ce=val_ce,
            val_acc=val_acc,
            lr=lr,
            wall_time=time.perf_counter() - t_start,
            reg_value=reg_sum / seen,
        )
        trace.epochs.append(stats)
        if trace_path:
            with open(trace_path, "a") as fh:
                fh.write(
                    ",".join(
                        [str(stats.epoch)]
                        + [
                            repr(v)
                            for v in (
                                stats.train_ce,
                                stats.train_acc,
                                stats.val_ce,
                                stats.val_acc,
                                stats.lr,
                                stats.wall_time,
                                stats.reg_value,
                            )
                        ]
                    )
                    + "\n"
                )
        if stats.train_ce <= cfg.stop_criterion:
            trace.converged = True
            trace.stopped_epoch = epoch
            break
    return trace


def _nonfinite_note(cache, epoch: int, step: int) -> str:
    layer = None
    if cache:
        for i, entry in enumerate(cache):
            out = entry["output"]
            val = out.data if isinstance(out, Tensor) else out
            if not np.isfinite(val).all():
                layer = i + 1
                break
    where = f" at layer {layer}" if layer is not None else ""
    return f"training diverged (non-finite loss{where}) at epoch {epoch}, step {step}"
