"""Training losses and DICE evaluation.

Losses take tensors and return scalar tensors on the tape. With plain numpy
inputs ``dice_loss`` returns a float64, which ``dice_score`` reuses so the
two agree bit-for-bit on hard masks.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError, ValidationError
from .tensor import Tensor

PROB_FLOOR = 1e-12
SMOOTH = 1.0

CLASS_NAMES = (
    "bottle",
    "can",
    "chain",
    "drink-carton",
    "hook",
    "propeller",
    "shampoo-bottle",
    "standing-bottle",
    "tire",
    "valve",
    "wall",
)


def _check_labels(labels: np.ndarray, num_channels: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_channels):
        raise ValidationError(f"label indices must lie in [0, {num_channels - 1}]")
    return labels.astype(np.intp)


def cross_entropy(probs: Tensor, labels: np.ndarray, axis: int = -3) -> Tensor:
    """Mean over pixels of ``-log p`` at the true class.

    ``probs`` holds per-pixel class probabilities along ``axis`` (default: the
    channel axis of a (C, H, W) or (B, C, H, W) map); ``labels`` has the same
    shape with that axis removed. Probabilities are floored at 1e-12.
    """
    axis = axis % probs.ndim
    expected = probs.shape[:axis] + probs.shape[axis + 1 :]
    labels = np.asarray(labels)
    if labels.shape != expected:
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match probabilities {probs.shape}")
    labels = _check_labels(labels, probs.shape[axis])
    idx = np.expand_dims(labels, axis)
    picked = np.take_along_axis(probs.data, idx, axis=axis).astype(np.float64)
    clamped = np.maximum(picked, PROB_FLOOR)
    n = labels.size
    value = T.DTYPE(-np.log(clamped).sum() / n)

    def bw(g):
        grad = np.zeros_like(probs.data)
        local = np.where(picked > PROB_FLOOR, -1.0 / clamped, 0.0) * (np.asarray(g).item() / n)
        np.put_along_axis(grad, idx, local.astype(T.DTYPE), axis=axis)
        return (grad,)

    return T.record_op(np.asarray(value), (probs,), bw)


def binary_cross_entropy_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Two-class cross-entropy with ``p = sigmoid(logit)`` as the foreground probability.

    Computed in log space; log-probabilities are floored at log(1e-12) like
    the multi-class form.
    """
    y = np.asarray(target, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"binary cross-entropy: target {y.shape} vs logits {logits.shape}")
    z = logits.data.astype(np.float64)
    log_floor = np.log(PROB_FLOOR)
    log_p = -np.logaddexp(0.0, -z)  # log sigmoid(z)
    log_q = -np.logaddexp(0.0, z)  # log (1 - sigmoid(z))
    lp, lq = np.maximum(log_p, log_floor), np.maximum(log_q, log_floor)
    n = y.size
    value = T.DTYPE(-(y * lp + (1.0 - y) * lq).sum() / n)

    def bw(g):
        p = np.exp(log_p)
        dp = np.where(log_p > log_floor, -(1.0 - p), 0.0)  # d(-log p)/dz
        dq = np.where(log_q > log_floor, p, 0.0)  # d(-log q)/dz
        return (((y * dp + (1.0 - y) * dq) * (np.asarray(g).item() / n)).astype(T.DTYPE),)

    return T.record_op(np.asarray(value), (logits,), bw)


def _dice_terms(pred: np.ndarray, target: np.ndarray):
    inter = (pred * target).sum(axis=(-2, -1))
    denom = pred.sum(axis=(-2, -1)) + target.sum(axis=(-2, -1)) + SMOOTH
    return inter, denom


def dice_loss(pred, target):
    """``1 - (2|P∩Y| + 1) / (|P| + |Y| + 1)`` per H x W map, averaged over leading axes.

    With numpy inputs the result is a float64 computed on hard or soft masks.
    With a tensor prediction the loss is differentiable, the intersection
    being the elementwise product sum.
    """
    y = np.asarray(target, dtype=np.float64)
    if not isinstance(pred, Tensor):
        p = np.asarray(pred, dtype=np.float64)
        if p.shape != y.shape:
            raise ShapeError(f"dice: prediction {p.shape} vs target {y.shape}")
        inter, denom = _dice_terms(p, y)
        return float(np.mean(1.0 - (2.0 * inter + SMOOTH) / denom))

    if pred.shape != y.shape:
        raise ShapeError(f"dice: prediction {pred.shape} vs target {y.shape}")
    p = pred.data.astype(np.float64)
    inter, denom = _dice_terms(p, y)
    num = 2.0 * inter + SMOOTH
    m = num.size
    value = T.DTYPE(np.mean(1.0 - num / denom))

    def bw(g):
        d = denom[..., None, None]
        grad = -(2.0 * y * d - num[..., None, None]) / (d * d)
        return ((grad * (np.asarray(g).item() / m)).astype(T.DTYPE),)

    return T.record_op(np.asarray(value), (pred,), bw)


def dice_score(pred: np.ndarray, target: np.ndarray) -> float:
    """DICE in percent for hard masks; empty against empty scores 100."""
    return 100.0 * (1.0 - dice_loss(np.asarray(pred, bool), np.asarray(target, bool)))


def one_hot(labels: np.ndarray, num_channels: int, axis: int = -3) -> np.ndarray:
    labels = _check_labels(labels, num_channels)
    out = np.eye(num_channels, dtype=np.float32)[labels]
    return np.moveaxis(out, -1, axis % (labels.ndim + 1))


def joint_loss(ce: Tensor, dice: Tensor) -> Tensor:
    """Unweighted sum of the cross-entropy and DICE terms."""
    return T.add(ce, dice)


def binary_joint_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Box-prompt objective on mask logits: two-class CE plus DICE of sigmoid probabilities."""
    return joint_loss(binary_cross_entropy_with_logits(logits, target), dice_loss(T.sigmoid(logits), target))


def semantic_joint_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Semantic objective on (B, C+1, H, W) or (C+1, H, W) logits.

    DICE is averaged over the foreground channels of the one-hot labels.
    """
    probs = T.softmax(logits, axis=-3)
    k = logits.shape[-3]
    fg_probs = T.slice_axis(probs, -3, 1, k)
    fg_target = one_hot(labels, k)[..., 1:, :, :]
    return joint_loss(cross_entropy(probs, labels), dice_loss(fg_probs, fg_target))


@dataclass
class DiceReport:
    """Per-class mean DICE (percent), sample counts and the macro average.

    Classes are keyed by foreground index (1-based); only classes with at
    least one sample appear in ``scores``.
    """

    scores: dict[int, float]
    counts: dict[int, int]
    average: float
    class_names: tuple[str, ...] = CLASS_NAMES
    metadata: dict = field(default_factory=lambda: {"pooling": "per-sample mean, then macro over classes"})

    def name(self, cls: int) -> str:
        return self.class_names[cls - 1] if cls - 1 < len(self.class_names) else f"class{cls}"

    def to_dict(self) -> dict:
        return {
            "scores": {str(k): v for k, v in self.scores.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
            "average": self.average,
            "class_names": list(self.class_names),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiceReport":
        return cls(
            scores={int(k): float(v) for k, v in d["scores"].items()},
            counts={int(k): int(v) for k, v in d["counts"].items()},
            average=float(d["average"]),
            class_names=tuple(d["class_names"]),
            metadata=dict(d.get("metadata", {})),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "name", "score", "count"])
        for c in sorted(self.scores):
            w.writerow([c, self.name(c), f"{self.scores[c]:.2f}", self.counts[c]])
        w.writerow(["", "average", f"{self.average:.2f}", sum(self.counts.values())])
        return buf.getvalue()

    def to_markdown(self) -> str:
        cols = sorted(self.scores)
        head = [self.name(c) for c in cols] + ["average"]
        vals = [f"{self.scores[c]:.2f}" for c in cols] + [f"{self.average:.2f}"]
        return "\n".join(
            ["| " + " | ".join(head) + " |", "|" + "---|" * len(head), "| " + " | ".join(vals) + " |"]
        )


def aggregate_report(per_sample, class_names: tuple[str, ...] = CLASS_NAMES) -> DiceReport:
    """Macro aggregation: mean within each class, then mean over present classes."""
    per_sample = list(per_sample)
    if not per_sample:
        raise UsageError("aggregate_report needs at least one (class, score) pair")
    grouped: dict[int, list[float]] = {}
    for cls, score in per_sample:
        grouped.setdefault(int(cls), []).append(float(score))
    scores = {c: float(np.mean(v)) for c, v in sorted(grouped.items())}
    counts = {c: len(v) for c, v in sorted(grouped.items())}
    return DiceReport(scores, counts, float(np.mean(list(scores.values()))), tuple(class_names))
