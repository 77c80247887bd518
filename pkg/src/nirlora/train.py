"""Adam with step decay, BCE-with-logits, pixel metrics and the epoch loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad, record
from .head import predict_mask
from .model import SegModel

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    batch_size: int = 8
    lr: float = 1e-4
    decay_factor: float = 0.91
    decay_every: int = 5
    # "epoch": decay every `decay_every` epochs; "step": every `decay_every` optimiser steps
    decay_unit: str = "epoch"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.decay_unit not in ("epoch", "step"):
            raise ValueError(f"decay_unit must be 'epoch' or 'step', got {self.decay_unit!r}")
        if self.decay_every < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs, batch_size and decay_every must be positive")


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """``lr0 * decay_factor ** floor(epoch / decay_every)``; also used with step counts."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_every)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean of ``log(1 + exp(-|x|)) + max(x, 0) - x y`` over all pixels."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    x = logits.data
    if y.shape != x.shape:
        if y.size == x.size:
            y = y.reshape(x.shape)
        else:
            raise ValueError(f"logits {x.shape} and targets {y.shape} differ")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("targets must be 0 or 1")
    y = y.astype(x.dtype)
    n = x.size
    per = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0) - x * y
    loss = np.asarray(per.mean(dtype=np.float64), dtype=x.dtype)

    def bwd(g):
        sig = np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))
        return ((sig - y) * (g / n)).astype(x.dtype), None

    return record(loss, (logits, Tensor(y)), bwd)


class Adam:
    """Bias-corrected Adam over a name -> tensor mapping of trainable parameters."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise TrainingError(f"no gradient for trainable parameters {missing[:5]}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.data.dtype)


def adam_step(params: dict[str, Tensor], state: Adam, lr: float) -> None:
    if set(params) != set(state.params):
        raise TrainingError("parameter set changed since the optimiser was created")
    state.step(lr)


# ---------------------------------------------------------------- metrics


def confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, fn, tn


def metrics_from_counts(tp: int, fp: int, fn: int) -> dict[str, float]:
    """IoU, precision, recall and F1 with fixed conventions for empty denominators.

    Nothing predicted and nothing present scores 1 everywhere; otherwise an
    empty denominator gives 0. F1 is computed as ``2TP / (2TP + FP + FN)``,
    which equals ``2pr / (p + r)`` whenever both are defined.
    """
    if tp + fp + fn == 0:
        return {"iou": 1.0, "f1": 1.0, "precision": 1.0, "recall": 1.0}
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return {
        "iou": tp / (tp + fp + fn),
        "f1": 2 * tp / (2 * tp + fp + fn),
        "precision": precision,
        "recall": recall,
    }


def metrics(pred_mask, gt_mask) -> dict[str, float]:
    tp, fp, fn, _ = confusion(pred_mask, gt_mask)
    return metrics_from_counts(tp, fp, fn)


METRIC_KEYS = ("iou", "f1", "precision", "recall")


@dataclass
class MetricReport:
    per_patch: list[dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]

    @classmethod
    def from_patches(cls, per_patch: list[dict[str, float]]) -> "MetricReport":
        if not per_patch:
            raise ValueError("cannot report on an empty split")
        n = len(per_patch)
        mean, std = {}, {}
        for k in METRIC_KEYS:
            vals = [p[k] for p in per_patch]
            mu = math.fsum(vals) / n
            mean[k] = mu
            std[k] = math.sqrt(math.fsum((v - mu) ** 2 for v in vals) / n)
        return cls(per_patch, mean, std)

    def format(self) -> str:
        return f"IoU {self.mean['iou']:.3f} ± {self.std['iou']:.3f}\nF1 {self.mean['f1']:.3f} ± {self.std['f1']:.3f}"


REPORT_PATTERN = r"^(IoU|F1) (\d\.\d{3}) ± (\d\.\d{3})$"


def predict_logits(model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(model(Tensor(images[i : i + batch_size])).data)
    return np.concatenate(outs)


def evaluate(model, images: np.ndarray, masks: np.ndarray, threshold: float = 0.5, batch_size: int = 8) -> MetricReport:
    """Per-patch metrics, then mean and population std.

    ``model`` is anything mapping a ``B x C x H x W`` tensor to ``B x 1 x H x W`` logits.
    """
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty split")
    preds = predict_mask(predict_logits(model, images, batch_size), threshold)
    return MetricReport.from_patches([metrics(p, g) for p, g in zip(preds, masks)])


# ---------------------------------------------------------------- training loop


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_iou: float
    val_f1: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.lr:.6g}\t{self.train_loss:.6f}\t{self.val_iou:.6f}\t{self.val_f1:.6f}"


@dataclass
class TrainResult:
    log: list[EpochLog]
    best_epoch: int
    best_val_iou: float
    best_state: dict[str, np.ndarray] = field(repr=False)
    lr_trace: list[float] = field(default_factory=list, repr=False)


def train(
    model: SegModel,
    train_data: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    val_data: tuple[np.ndarray, np.ndarray] | None = None,
    on_epoch=None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of shuffled mini-batch Adam.

    The short last batch is kept. The trainable tensors from the epoch with
    the best validation IoU are kept in ``best_state`` (the last epoch when
    there is no validation split). Frozen tensors are checked bitwise at the end.
    """
    images, masks = train_data
    if len(images) == 0:
        raise ValueError("empty training split")
    params = model.trainable()
    frozen_before = {k: p.data.copy() for k, p in model.frozen().items()}
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    n = len(images)
    history: list[EpochLog] = []
    lr_trace: list[float] = []
    best_iou, best_epoch, best_state = -1.0, -1, {}
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses, weights = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            lr = lr_schedule(epoch if cfg.decay_unit == "epoch" else step, cfg)
            model.zero_grad()
            loss = bce_with_logits(model(Tensor(images[idx])), masks[idx][:, None])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}, lr {lr:g}")
            loss.backward()
            opt.step(lr)
            step += 1
            losses.append(value)
            weights.append(len(idx))
        epoch_lr = lr_schedule(epoch if cfg.decay_unit == "epoch" else step - 1, cfg)
        lr_trace.append(epoch_lr)
        train_loss = math.fsum(l * w for l, w in zip(losses, weights)) / n
        if val_data is not None and len(val_data[0]):
            rep = evaluate(model, *val_data, threshold=cfg.threshold, batch_size=cfg.batch_size)
            val_iou, val_f1 = rep.mean["iou"], rep.mean["f1"]
            improved = val_iou > best_iou
        else:
            val_iou = val_f1 = float("nan")
            improved = True
        if improved:
            best_iou = val_iou if math.isfinite(val_iou) else best_iou
            best_epoch = epoch
            best_state = copy.deepcopy({k: p.data for k, p in params.items()})
        entry = EpochLog(epoch, epoch_lr, train_loss, val_iou, val_f1)
        history.append(entry)
        log.debug(entry.line())
        if on_epoch is not None:
            on_epoch(entry)
    for k, p in model.frozen().items():
        if not np.array_equal(frozen_before[k], p.data):
            raise TrainingError(f"frozen tensor {k} changed during training")
    return TrainResult(history, best_epoch, best_iou, best_state, lr_trace)
