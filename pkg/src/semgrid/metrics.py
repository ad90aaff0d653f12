"""Segmentation evaluation: confusion matrix and the derived accuracy metrics.

Void pixels never count: truth pixels labeled UNLABELED (or any negative id)
and predictions carrying the projection sentinel both land in the ignore
tally. Classes absent from the ground truth are excluded from averages and
reported as NaN.

Per-class accuracy is reported under both conventions: recall TP/(TP+FN),
the common "class accuracy", and precision TP/(TP+FP), so results remain
comparable against either reading of published tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from semgrid.core import SemgridError


class ShapeError(SemgridError):
    """Truth and prediction images disagree in shape or label range."""


class EmptyEvalError(SemgridError):
    """No counted pixels to summarize."""


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (L, L) int64; rows = truth, cols = prediction
    ignored: int = 0

    @staticmethod
    def zeros(label_count: int) -> "ConfusionMatrix":
        return ConfusionMatrix(np.zeros((label_count, label_count), np.int64), 0)

    @property
    def label_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeError("cannot merge confusion matrices of different label counts")
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)


def accumulate(cm: ConfusionMatrix, truth: np.ndarray, prediction: np.ndarray) -> ConfusionMatrix:
    """Count per-pixel (truth, prediction) pairs into the matrix, in place.

    Negative labels on either side are void and only increase the ignore
    tally.
    """
    t = np.asarray(truth)
    p = np.asarray(prediction)
    if t.shape != p.shape:
        raise ShapeError(f"truth {t.shape} vs prediction {p.shape}")
    t = t.ravel()
    p = p.ravel()
    l = cm.label_count
    if t.max(initial=-1) >= l or p.max(initial=-1) >= l:
        raise ShapeError("label id outside the confusion matrix range")
    counted = (t >= 0) & (p >= 0)
    cm.ignored += int(np.sum(~counted))
    np.add.at(cm.counts, (t[counted], p[counted]), 1)
    return cm


@dataclass
class MetricSummary:
    per_class_recall: np.ndarray  # NaN where the class is absent from truth
    per_class_precision: np.ndarray
    per_class_iou: np.ndarray
    present: np.ndarray  # bool, class appears in truth
    mean_recall: float
    mean_precision: float
    mean_iou: float
    fw_iou: float
    global_accuracy: float
    counted_pixels: int
    ignored_pixels: int


def summarize(cm: ConfusionMatrix) -> MetricSummary:
    total = cm.total
    if total == 0:
        raise EmptyEvalError("confusion matrix holds no counted pixels")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    row = counts.sum(axis=1)  # truth pixels per class
    col = counts.sum(axis=0)  # predicted pixels per class
    present = row > 0

    recall = np.full(cm.label_count, np.nan)
    precision = np.full(cm.label_count, np.nan)
    iou = np.full(cm.label_count, np.nan)
    recall[present] = tp[present] / row[present]
    # a present class never predicted scores zero precision, not NaN
    has_pred = col > 0
    precision[present & has_pred] = tp[present & has_pred] / col[present & has_pred]
    precision[present & ~has_pred] = 0.0
    union = row + col - tp
    iou[present] = tp[present] / union[present]

    freq = row[present] / total
    return MetricSummary(
        per_class_recall=recall,
        per_class_precision=precision,
        per_class_iou=iou,
        present=present,
        mean_recall=float(recall[present].mean()),
        mean_precision=float(precision[present].mean()),
        mean_iou=float(iou[present].mean()),
        fw_iou=float(np.sum(freq * iou[present])),
        global_accuracy=float(tp.sum() / total),
        counted_pixels=total,
        ignored_pixels=cm.ignored,
    )
