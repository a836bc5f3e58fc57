"""Classification and overlap metrics: accuracy, precision, recall, F1, Dice.

Conventions: multi-class precision/recall/F1 are macro-averaged; a metric
whose denominator is zero contributes 0; Dice of two empty masks is 1.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ClassOutOfRange, EmptyInput, LengthMismatch, NonBinaryInput, ShapeMismatch

MASK_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest counts, indexed by class."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def classes(self) -> int:
        return len(self.tp)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])


def confusion_counts(pred, truth, classes: int) -> ConfusionCounts:
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.size} predictions for {truth.size} labels")
    if classes < 1:
        raise ClassOutOfRange("need at least one class")
    for arr in (pred, truth):
        if arr.size and (np.any(arr < 0) or np.any(arr >= classes) or np.any(arr != np.round(arr))):
            raise ClassOutOfRange(f"class indices must be integers in [0, {classes})")
    pred = pred.astype(np.int64)
    truth = truth.astype(np.int64)
    matrix = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(matrix, (truth, pred), 1)
    tp = np.diag(matrix).copy()
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def binary_counts(tp: int, fp: int, fn: int, tn: int) -> ConfusionCounts:
    """Counts for a two-class problem given the positive-class tallies."""
    return ConfusionCounts(np.array([tn, tp]), np.array([fn, fp]), np.array([fp, fn]),
                           np.array([tp, tn]))


def accuracy(cc: ConfusionCounts) -> float:
    total = cc.total
    if total == 0:
        raise EmptyInput("accuracy of zero samples is undefined")
    return float(cc.tp.sum()) / total


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _f1(p, r):
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    return _ratio(2.0 * p * r, p + r)


def precision_recall_f1(cc: ConfusionCounts, averaging: str = "macro",
                        positive: int = 1) -> tuple[float, float, float]:
    if averaging == "binary":
        i = positive
        p = float(_ratio(cc.tp[i], cc.tp[i] + cc.fp[i]))
        r = float(_ratio(cc.tp[i], cc.tp[i] + cc.fn[i]))
        return p, r, float(_f1(p, r))
    if averaging == "macro":
        p = _ratio(cc.tp, cc.tp + cc.fp)
        r = _ratio(cc.tp, cc.tp + cc.fn)
        return float(p.mean()), float(r.mean()), float(_f1(p, r).mean())
    raise ValueError(f"unknown averaging {averaging!r}")


def _binary_mask(m, what):
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise NonBinaryInput(f"{what} must contain only 0 and 1")
    return m.astype(bool)


def dice_coefficient(pred_mask, truth_mask) -> float:
    p = np.asarray(pred_mask)
    t = np.asarray(truth_mask)
    if p.shape != t.shape:
        raise ShapeMismatch(f"mask shapes differ: {p.shape} vs {t.shape}")
    p = _binary_mask(p, "pred_mask")
    t = _binary_mask(t, "truth_mask")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    dice: float | None = None
    averaging: str = "macro"

    def to_text(self) -> str:
        """Flat ``key=value`` block, one metric per line."""
        lines = [f"{f.name}={self._fmt(getattr(self, f.name))}" for f in fields(self)
                 if getattr(self, f.name) is not None]
        return "\n".join(lines)

    @staticmethod
    def _fmt(v):
        return v if isinstance(v, str) else f"{v:.6f}"

    @staticmethod
    def csv_header() -> str:
        return "accuracy,precision,recall,f1,dice,averaging"

    def csv_row(self) -> str:
        vals = [self.accuracy, self.precision, self.recall, self.f1]
        cells = [f"{v:.6f}" for v in vals]
        cells.append("" if self.dice is None else f"{self.dice:.6f}")
        cells.append(self.averaging)
        return ",".join(cells)


def classification_report(pred, truth, classes: int) -> MetricReport:
    """Binary averaging for two classes (class 1 positive), macro otherwise."""
    cc = confusion_counts(pred, truth, classes)
    averaging = "binary" if classes == 2 else "macro"
    p, r, f1 = precision_recall_f1(cc, averaging)
    return MetricReport(accuracy(cc), p, r, f1, None, averaging)


def segmentation_report(prob, truth_mask, threshold: float = MASK_THRESHOLD) -> MetricReport:
    """Pixel-level report for predicted foreground probabilities."""
    pred = (np.asarray(prob) >= threshold).astype(np.int64)
    truth = _binary_mask(truth_mask, "truth_mask").astype(np.int64)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs mask {truth.shape}")
    cc = confusion_counts(pred, truth, 2)
    p, r, f1 = precision_recall_f1(cc, "binary")
    return MetricReport(accuracy(cc), p, r, f1, dice_coefficient(pred, truth), "binary")
