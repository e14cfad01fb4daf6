"""Per-class confusion counts, weighted accuracy and binary F1.

Weighted accuracy is (TP * N/P + TN) / (2N): a predictor that always says
"negative" scores exactly 0.5 instead of looking good on imbalanced classes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConfusionCounts",
    "confusion_counts",
    "weighted_accuracy",
    "binary_f1",
    "mean_over_classes",
]


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


def confusion_counts(predictions: np.ndarray,
                     labels: np.ndarray) -> list[ConfusionCounts]:
    """Per-class counts from (N, classes) binary predictions and labels."""
    pred = np.asarray(predictions) != 0
    truth = np.asarray(labels) != 0
    if pred.shape != truth.shape:
        raise ValueError(
            f"predictions {pred.shape} and labels {truth.shape} differ")
    out = []
    for c in range(pred.shape[1]):
        p, y = pred[:, c], truth[:, c]
        out.append(ConfusionCounts(tp=int(np.sum(p & y)),
                                   fp=int(np.sum(p & ~y)),
                                   tn=int(np.sum(~p & ~y)),
                                   fn=int(np.sum(~p & y))))
    return out


def weighted_accuracy(c: ConfusionCounts) -> float | None:
    """(TP * N/P + TN) / (2N); None when P or N is zero (metric absent)."""
    p, n = c.positives, c.negatives
    if p == 0 or n == 0:
        return None
    return (c.tp * n / p + c.tn) / (2.0 * n)


def binary_f1(c: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); defined as 0 (with a warning) when empty."""
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        warnings.warn("binary F1 undefined (no positives anywhere); using 0",
                      stacklevel=2)
        return 0.0
    return 2.0 * c.tp / denom


def mean_over_classes(values) -> float:
    """Macro average skipping absent (None) per-class values."""
    present = [v for v in values if v is not None]
    if not present:
        return float("nan")
    return float(np.mean(present))
