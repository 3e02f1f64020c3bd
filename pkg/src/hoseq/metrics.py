"""Evaluation metrics for scalar sentiment regression and the derived
binary / 7-class protocols.

Protocol choices fixed here so results are reproducible: the binary split is
by sign with zero counted positive; the 7-class mapping clamps to [-3, 3]
then rounds half away from zero; F1 is reported for the positive class only.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UndefinedMetricError


def _paired(pred, target, minimum: int = 1):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim != 1 or target.ndim != 1 or pred.shape != target.shape:
        raise DataError(
            f"need equal-length vectors, got shapes {pred.shape} and {target.shape}"
        )
    if pred.size < minimum:
        raise DataError(f"need at least {minimum} samples, got {pred.size}")
    return pred, target


def mae(pred, target) -> float:
    """Mean absolute error (lower is better)."""
    pred, target = _paired(pred, target)
    return float(np.mean(np.abs(pred - target)))


def pearson(pred, target) -> float:
    """Sample Pearson correlation coefficient."""
    pred, target = _paired(pred, target, minimum=2)
    dp = pred - pred.mean()
    dt = target - target.mean()
    ss_p = float(dp @ dp)
    ss_t = float(dt @ dt)
    if ss_p == 0.0 or ss_t == 0.0:
        raise UndefinedMetricError("Pearson correlation undefined for zero-variance input")
    r = float(dp @ dt) / math.sqrt(ss_p * ss_t)
    return float(min(1.0, max(-1.0, r)))


def map_to_class7(y: float) -> int:
    """Clamp to [-3, 3], round half away from zero, and shift to {0..6}."""
    y = float(y)
    if not math.isfinite(y):
        raise DataError(f"cannot map non-finite value {y} to a class")
    c = min(3.0, max(-3.0, y))
    s = math.floor(abs(c) + 0.5)
    if c < 0:
        s = -s
    return int(s) + 3


def binary_metrics(pred, target) -> tuple[float, float]:
    """Accuracy and positive-class F1 after binarizing by sign (>= 0 is
    positive).

    When the positive class is empty in both predictions and targets the F1
    is 1 by convention; that case is flagged with a UserWarning.
    """
    pred, target = _paired(pred, target)
    pos_p = pred >= 0
    pos_t = target >= 0
    accuracy = float(np.mean(pos_p == pos_t))
    tp = int(np.sum(pos_p & pos_t))
    fp = int(np.sum(pos_p & ~pos_t))
    fn = int(np.sum(~pos_p & pos_t))
    if tp == 0 and fp == 0 and fn == 0:
        warnings.warn(
            "positive class absent from both predictions and targets; F1 = 1 by convention",
            UserWarning,
            stacklevel=2,
        )
        return accuracy, 1.0
    if tp == 0:
        return accuracy, 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return accuracy, 2.0 * precision * recall / (precision + recall)


def class7_accuracy(pred, target) -> float:
    """Fraction of samples whose 7-class mappings agree."""
    pred, target = _paired(pred, target)
    hits = sum(map_to_class7(p) == map_to_class7(t) for p, t in zip(pred, target))
    return hits / pred.size


@dataclass
class MetricsReport:
    """All five evaluation metrics for one prediction run."""

    mae: float
    correlation: float
    binary_accuracy: float
    binary_f1: float
    class7_accuracy: float
    n: int

    def to_text(self) -> str:
        """Flat key=value block; floats use repr so output is deterministic."""
        return (
            f"mae={self.mae!r}\n"
            f"correlation={self.correlation!r}\n"
            f"binary_accuracy={self.binary_accuracy!r}\n"
            f"binary_f1={self.binary_f1!r}\n"
            f"class7_accuracy={self.class7_accuracy!r}\n"
            f"n={self.n}\n"
        )


def compute_report(pred, target) -> MetricsReport:
    """Evaluate all metrics on one prediction/target pair (needs n >= 2)."""
    pred, target = _paired(pred, target, minimum=2)
    accuracy, f1 = binary_metrics(pred, target)
    return MetricsReport(
        mae=mae(pred, target),
        correlation=pearson(pred, target),
        binary_accuracy=accuracy,
        binary_f1=f1,
        class7_accuracy=class7_accuracy(pred, target),
        n=int(pred.size),
    )
