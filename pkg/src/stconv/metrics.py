"""Pixel confusion counts and the IoU family derived from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, sigmoid


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class MetricsRecord:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def iou(self) -> float:
        # two empty masks agree perfectly
        if self.tp + self.fp + self.fn == 0:
            return 1.0
        return self.tp / (self.tp + self.fp + self.fn)

    def __add__(self, other: "MetricsRecord") -> "MetricsRecord":
        return MetricsRecord(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def as_row(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "iou": self.iou}


CSV_FIELDS = ("tp", "fp", "fn", "tn", "precision", "recall", "f1", "iou")


def score_masks(pred, truth) -> MetricsRecord:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    truth = truth.astype(bool)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return MetricsRecord(tp, fp, fn, pred.size - tp - fp - fn)


def binarize(pred_logits, threshold: float = 0.5) -> np.ndarray:
    """Rain mask where sigmoid(logit) reaches ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return sigmoid(np.asarray(pred_logits, dtype=np.float64)) >= threshold


def binarize_and_score(pred_logits, truth, threshold: float = 0.5) -> MetricsRecord:
    """Confusion counts over the whole (N, T, H, W) volume."""
    return score_masks(binarize(pred_logits, threshold), truth)


def mean_iou(records) -> float:
    """Average of per-region IoU values."""
    records = list(records)
    if not records:
        raise ValueError("mean_iou needs at least one record")
    return float(np.mean([r.iou for r in records]))
