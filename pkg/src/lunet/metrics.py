"""Confusion counting and the segmentation scores built on it.

``n[i][j]`` counts pixels of true class ``i`` predicted as class ``j``
(0 = background, 1 = foreground). Every score is a function of these four
counts, so accumulators over disjoint pixel sets can simply be added.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lunet.errors import EmptyAccumulator, NonBinaryInput, ShapeMismatch

TWO_CLASS = "two"
FOREGROUND_ONLY = "fg"


def _as_binary(a, name):
    a = np.asarray(getattr(a, "pixels", a))
    if a.dtype == bool:
        return a
    if not np.all((a == 0) | (a == 1)):
        raise NonBinaryInput(f"{name} contains values other than 0 and 1")
    return a.astype(bool)


@dataclass
class ConfusionAccumulator:
    n: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=np.int64))

    def accumulate(self, pred_mask, true_mask):
        """Add the pixels of one prediction/ground-truth pair; returns self."""
        p = _as_binary(pred_mask, "prediction")
        t = _as_binary(true_mask, "ground truth")
        if p.shape != t.shape:
            raise ShapeMismatch(f"prediction {p.shape} vs truth {t.shape}")
        tp = int(np.count_nonzero(p & t))
        fn = int(np.count_nonzero(t)) - tp
        fp = int(np.count_nonzero(p)) - tp
        tn = p.size - tp - fn - fp
        self.n += np.array([[tn, fp], [fn, tp]], dtype=np.int64)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        return ConfusionAccumulator(self.n + other.n)

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.n.sum())

    def class_totals(self):
        """t_i: number of pixels whose true class is i."""
        return self.n.sum(axis=1)

    def per_class_iou(self):
        t = self.class_totals()
        pred = self.n.sum(axis=0)
        diag = np.diag(self.n)
        union = t + pred - diag
        return np.where(union > 0, diag / np.maximum(union, 1), 1.0)

    def per_class_accuracy(self):
        t = self.class_totals()
        diag = np.diag(self.n)
        return np.where(t > 0, diag / np.maximum(t, 1), 1.0)


@dataclass(frozen=True)
class MetricsReport:
    pixel_acc: float
    mean_acc: float
    mean_iou: float
    fwiou: float
    precision: float
    recall: float
    class_mode: str = TWO_CLASS

    def as_percent_row(self):
        return [f"{100 * v:.1f}" for v in (self.pixel_acc, self.mean_acc, self.mean_iou, self.fwiou)]


def compute(acc: ConfusionAccumulator, class_mode: str = TWO_CLASS) -> MetricsReport:
    """Pixel accuracy, mean accuracy, mean IoU and frequency-weighted IoU.

    ``two`` averages over background and foreground; ``fg`` averages over the
    foreground class only. Classes with no true pixels are left out of the
    averages. If that leaves nothing (``fg`` mode on an image without
    foreground) the score is 1.0 when no foreground was predicted and 0.0
    otherwise.
    """
    if acc.total == 0:
        raise EmptyAccumulator("no pixels accumulated")
    if class_mode not in (TWO_CLASS, FOREGROUND_ONLY):
        raise ValueError(f"unknown class mode {class_mode!r}")
    n = acc.n
    t = acc.class_totals()
    diag = np.diag(n)
    iou = acc.per_class_iou()
    cls_acc = acc.per_class_accuracy()

    pixel_acc = diag.sum() / t.sum()
    fwiou = float((t * iou).sum() / t.sum())
    classes = [0, 1] if class_mode == TWO_CLASS else [1]
    present = [i for i in classes if t[i] > 0]
    if present:
        mean_acc = float(np.mean([cls_acc[i] for i in present]))
        mean_iou = float(np.mean([iou[i] for i in present]))
    else:
        mean_acc = mean_iou = 1.0 if n[0, 1] == 0 else 0.0
    precision, recall = precision_recall(acc)
    return MetricsReport(float(pixel_acc), mean_acc, mean_iou, fwiou, precision, recall, class_mode)


def precision_recall(acc: ConfusionAccumulator):
    """Foreground precision and recall.

    An empty denominator scores 1.0 if the other error count is also zero
    (nothing to find, nothing wrongly found) and 0.0 otherwise.
    """
    if acc.total == 0:
        raise EmptyAccumulator("no pixels accumulated")
    n = acc.n
    tp, fp, fn = int(n[1, 1]), int(n[0, 1]), int(n[1, 0])
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if fn == 0 else 0.0
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 1.0 if fp == 0 else 0.0
    return precision, recall


def evaluate_masks(preds, truths, class_mode: str = TWO_CLASS) -> MetricsReport:
    """Pool counts over many (prediction, truth) pairs and score them once."""
    acc = ConfusionAccumulator()
    for p, t in zip(preds, truths, strict=True):
        acc.accumulate(p, t)
    return compute(acc, class_mode)


REPORT_HEADER = ["dataset", "method", "pixel_acc", "mean_acc", "mean_iou", "fwiou"]


def report_row(dataset: str, method: str, report: MetricsReport):
    return [dataset, method, *report.as_percent_row()]
