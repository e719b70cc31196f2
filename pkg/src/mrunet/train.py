"""Binary cross-entropy loss, the Adam optimizer, and the epoch loop with
best-epoch tracking.

Per-image loss is the pixel sum of binary cross-entropy; a batch averages
the per-image sums. Validation runs in inference mode after every epoch
and the best validation Jaccard decides which weights get checkpointed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .metrics import binarize, jaccard
from .model import ModelGraph, save_checkpoint
from .tensor import (
    Node,
    NumericError,
    ShapeError,
    Tensor,
    accumulate_grad,
    backward,
    constant,
    make_op,
    scale,
)

PROB_CLAMP = 1e-7  # predictions are clamped to [1e-7, 1 - 1e-7] before log


class InvalidBatchError(ValueError):
    """Loss of an empty batch requested."""


class TrainAbortError(RuntimeError):
    """A numeric error aborted training; carries the failing epoch index."""

    def __init__(self, epoch: int, message: str = ""):
        super().__init__(message or f"numeric error during epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def bce_image(y, yhat) -> float:
    """Pixel-summed binary cross-entropy for one image.

    y must be strictly binary; yhat is clamped away from 0 and 1 so the
    logs stay finite.
    """
    ya, pa = _as_array(y), _as_array(yhat)
    if ya.shape != pa.shape:
        raise ShapeError(f"mask/prediction shapes differ: {ya.shape} vs {pa.shape}")
    if not np.isin(ya, (0.0, 1.0)).all():
        raise ValueError("ground-truth mask must contain only 0 and 1")
    p = np.clip(pa.astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    yb = ya.astype(np.float64)
    return float(-(yb * np.log(p) + (1.0 - yb) * np.log1p(-p)).sum())


def batch_loss(pairs) -> float:
    """Mean over the batch of per-image cross-entropy sums."""
    pairs = list(pairs)
    if not pairs:
        raise InvalidBatchError("batch must contain at least one image")
    return sum(bce_image(y, yhat) for y, yhat in pairs) / len(pairs)


def bce_sum_node(pred: Node, target: np.ndarray) -> Node:
    """Differentiable pixel-summed cross-entropy against a fixed mask.

    The gradient is zero wherever the clamp is active, matching the clamped
    forward value exactly.
    """
    t = np.asarray(target, dtype=pred.value.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"target shape {t.shape} != prediction shape {pred.shape}")
    lo = pred.value.dtype.type(PROB_CLAMP)
    hi = pred.value.dtype.type(1.0 - PROB_CLAMP)
    p = np.clip(pred.data, lo, hi)
    val = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum(dtype=pred.value.dtype)

    def bk(g):
        inside = (pred.data > lo) & (pred.data < hi)
        dp = np.where(inside, -t / p + (1.0 - t) / (1.0 - p), 0.0)
        accumulate_grad(pred, g[0] * dp)

    return make_op(val.reshape(1), "bce_sum", (pred,), bk)


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in params.items()},
                   v={k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig):
    """One Adam update, in place.

    m <- b1*m + (1-b1)*g ; v <- b2*v + (1-b2)*g^2, with bias correction
    m_hat = m/(1-b1^t), v_hat = v/(1-b2^t), and the step
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    """
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {theta.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        theta -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.epsilon_adam)
        if not np.isfinite(theta).all():
            raise NumericError(f"parameter {name!r} became non-finite")
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_jaccard: float


@dataclass
class RunReport:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_jaccard: float = 0.0

    def to_dict(self) -> dict:
        return {
            "history": [
                {"epoch": r.epoch, "train_loss": r.train_loss,
                 "val_loss": r.val_loss, "val_jaccard": r.val_jaccard}
                for r in self.history
            ],
            "best_epoch": self.best_epoch,
            "best_val_jaccard": self.best_val_jaccard,
        }


HISTORY_HEADER = ("epoch", "train_loss", "val_loss", "val_jaccard")


def _stack(samples) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image.data for s in samples]).astype(np.float32)
    masks = np.stack([s.mask.data for s in samples]).astype(np.float32)
    return images, masks


def evaluate(model: ModelGraph, samples, batch_size: int = 16) -> tuple[float, float]:
    """Mean per-image loss and mean per-image Jaccard, in inference mode."""
    images, masks = _stack(samples)
    n = len(samples)
    total_loss = 0.0
    total_j = 0.0
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = masks[start:start + batch_size]
        pred = model.apply(constant(xb), "inference").data
        for i in range(xb.shape[0]):
            total_loss += bce_image(yb[i], pred[i])
            total_j += jaccard(yb[i], binarize(pred[i]).data)
    return total_loss / n, total_j / n


def train(model: ModelGraph, train_set, val_set, cfg: TrainConfig,
          history_path=None, checkpoint_path=None) -> RunReport:
    """Run the epoch loop and track the best validation Jaccard.

    Batches are drawn in a seeded shuffle order; the last partial batch is
    kept. When history_path is given, one CSV row is appended per epoch;
    when checkpoint_path is given, weights and batchnorm statistics are
    written every time the best validation Jaccard improves.
    """
    train_ids = {s.id for s in train_set}
    val_ids = {s.id for s in val_set}
    if train_ids & val_ids:
        raise ValueError(f"train/val sets overlap: {sorted(train_ids & val_ids)[:3]}")
    params = {name: node for name, node in model.trainable_parameters()}
    arrays = {name: node.value.data for name, node in params.items()}
    state = AdamState.zeros(arrays)
    rng = np.random.default_rng(cfg.seed)
    images, masks = _stack(train_set)
    n = len(train_set)

    writer = None
    if history_path is not None:
        fp = open(history_path, "w", newline="")
        writer = csv.writer(fp)
        writer.writerow(HISTORY_HEADER)
        fp.flush()

    report = RunReport(best_epoch=0, best_val_jaccard=-1.0)
    try:
        for epoch in range(1, cfg.epochs + 1):
            try:
                order = rng.permutation(n) if cfg.shuffle else np.arange(n)
                running = 0.0
                for start in range(0, n, cfg.batch_size):
                    idx = order[start:start + cfg.batch_size]
                    xb = images[idx]
                    yb = masks[idx]
                    pred = model.apply(constant(xb), "training")
                    loss = scale(bce_sum_node(pred, yb), 1.0 / len(idx))
                    for node in params.values():
                        node.grad = None
                    backward(loss)
                    grads = {name: node.grad for name, node in params.items()}
                    adam_step(arrays, grads, state, cfg)
                    running += float(loss.data[0]) * len(idx)
                train_loss = running / n
                val_loss, val_j = evaluate(model, val_set, cfg.batch_size)
            except NumericError as exc:
                raise TrainAbortError(epoch) from exc
            report.history.append(EpochRecord(epoch, train_loss, val_loss, val_j))
            if val_j > report.best_val_jaccard:
                report.best_val_jaccard = val_j
                report.best_epoch = epoch
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path)
            if writer is not None:
                writer.writerow([epoch, repr(train_loss), repr(val_loss), repr(val_j)])
                fp.flush()
    finally:
        if writer is not None:
            fp.close()
    return report
