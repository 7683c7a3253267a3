"""Pixel accuracy and mean IoU over confusion matrices."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

IGNORE_INDEX = 255


@dataclass
class ConfusionMatrix:
    """Square pixel-count matrix; ``counts[i, j]`` = pixels of true class i predicted as j."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ValueError(f"counts shape {self.counts.shape} does not match num_classes={self.num_classes}")
            if (self.counts < 0).any():
                raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())


def accumulate(matrix: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    """Return ``matrix`` plus the counts of one (pred, gt) pair; gt pixels equal to 255 are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    n = matrix.num_classes
    pred = pred.astype(np.int64).ravel()
    gt = gt.astype(np.int64).ravel()
    if pred.size and (pred.min() < 0 or pred.max() >= n):
        raise ValueError(f"prediction contains values outside [0, {n})")
    keep = gt != IGNORE_INDEX
    gt = gt[keep]
    pred = pred[keep]
    if gt.size and (gt.min() < 0 or gt.max() >= n):
        raise ValueError(f"ground truth contains values outside [0, {n}) other than {IGNORE_INDEX}")
    counts = np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(n, matrix.counts + counts)


def accuracy(matrix: ConfusionMatrix) -> float:
    total = matrix.counts.sum()
    if total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(matrix.counts) / total)


def miou(matrix: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """Mean IoU and the per-class IoU vector.

    Classes whose union is zero (absent from both prediction and ground truth)
    get NaN in the vector and are left out of the mean.
    """
    c = matrix.counts.astype(np.float64)
    if c.sum() == 0:
        raise ValueError("mIoU of an empty confusion matrix is undefined")
    inter = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - inter
    present = union > 0
    iou = np.full(matrix.num_classes, np.nan)
    iou[present] = inter[present] / union[present]
    return float(iou[present].mean()), iou


def metric_report(matrix: ConfusionMatrix, class_names=None) -> dict:
    """Structured report with Acc, mIoU, per-class IoU, totals and the raw matrix."""
    m, iou = miou(matrix)
    names = list(class_names) if class_names is not None else [str(i) for i in range(matrix.num_classes)]
    return {
        "acc": accuracy(matrix),
        "miou": m,
        "per_class_iou": {name: (None if np.isnan(v) else float(v)) for name, v in zip(names, iou)},
        "total_pixels": matrix.total,
        "gt_pixels_per_class": [int(v) for v in matrix.counts.sum(axis=1)],
        "confusion_matrix": matrix.counts.tolist(),
    }


def report_from_json(text: str) -> ConfusionMatrix:
    data = json.loads(text) if isinstance(text, str) else text
    counts = np.asarray(data["confusion_matrix"], dtype=np.int64)
    return ConfusionMatrix(counts.shape[0], counts)


def check_report(report: dict, atol: float = 1e-12) -> bool:
    """True when every metric in ``report`` equals its recomputation from the stored matrix."""
    fresh = metric_report(report_from_json(report))
    if abs(fresh["acc"] - report["acc"]) > atol or abs(fresh["miou"] - report["miou"]) > atol:
        return False
    for a, b in zip(fresh["per_class_iou"].values(), report["per_class_iou"].values()):
        if (a is None) != (b is None) or (a is not None and abs(a - b) > atol):
            return False
    return True
