"""Overlap metrics on integer class maps.

Both Dice and IoU treat a class absent from prediction *and* ground truth as
a perfect 1.0, so empty structures do not poison per-sample averages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class ConfusionCounts:
    tp: np.ndarray  # int64 [K]
    fp: np.ndarray
    fn: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.tp.shape[0])

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} shapes differ")
    if pred.size == 0:
        raise ShapeError("cannot compute a confusion over zero pixels")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.min() < 0 or a.max() >= num_classes:
            raise ShapeError(f"{name} contains class {int(a.max())} outside [0, {num_classes})")
    joint = gt.ravel().astype(np.int64) * num_classes + pred.ravel().astype(np.int64)
    cm = np.bincount(joint, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp  # predicted k but truth differs
    fn = cm.sum(axis=1) - tp  # truth k but predicted differently
    return ConfusionCounts(tp=tp, fp=fp, fn=fn)


def dice(counts: ConfusionCounts, k: int) -> float:
    tp, fp, fn = int(counts.tp[k]), int(counts.fp[k]), int(counts.fn[k])
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def iou(counts: ConfusionCounts, k: int) -> float:
    tp, fp, fn = int(counts.tp[k]), int(counts.fp[k]), int(counts.fn[k])
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def mean_foreground_dice(counts: ConfusionCounts, num_classes: int) -> float:
    """Mean Dice over classes 1..K-1 (class 0 is background)."""
    if num_classes < 2:
        raise ConfigError(f"need >= 2 classes for a foreground mean, got {num_classes}")
    return sum(dice(counts, k) for k in range(1, num_classes)) / (num_classes - 1)


def write_report_csv(class_dice, class_iou, path):
    """Per-class rows plus a mean_fg summary row, 9 significant digits."""
    k = len(class_dice)
    with open(path, "w", encoding="utf-8") as f:
        f.write("class,dice,iou\n")
        for c in range(k):
            f.write(f"{c},{class_dice[c]:.9g},{class_iou[c]:.9g}\n")
        mean_d = sum(class_dice[1:]) / (k - 1)
        mean_i = sum(class_iou[1:]) / (k - 1)
        f.write(f"mean_fg,{mean_d:.9g},{mean_i:.9g}\n")
