"""
Evaluation measures.

Depth: ratio-threshold accuracies at 1.25, 1.25², 1.25³, absolute and
squared relative difference, linear and log RMSE and the scale-invariant
error (variance of the log difference). Segmentation: global pixel
accuracy, mean class accuracy and mean IoU from a confusion matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import IGNORE_LABEL, DataError

THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)


@dataclass
class DepthMetricsReport:
    delta1: float
    delta2: float
    delta3: float
    ard: float
    srd: float
    rmse_linear: float
    rmse_log: float
    sie: float


@dataclass
class SegMetricsReport:
    global_acc: float
    class_acc: float
    mean_iou: float
    per_class_iou: list = field(default_factory=list)


def _depth_pixels(pred, gt, valid):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise DataError(f"pred has {pred.size} pixels, gt has {gt.size}")
    if valid is None:
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(gt) & (gt > 0)
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    if valid.shape != gt.shape:
        raise DataError("mask does not match the depth maps")
    p, g = pred[valid], gt[valid]
    if p.size == 0:
        raise DataError("no valid depth pixels")
    if not (np.all(p > 0) and np.all(g > 0)):
        raise DataError("depth must be strictly positive on valid pixels")
    return p, g


class DepthAccumulator:
    """Pools valid pixels across images (pixel-pooled, not image-averaged)."""

    def __init__(self):
        self._pred, self._gt = [], []

    def add(self, pred, gt, valid=None):
        p, g = _depth_pixels(pred, gt, valid)
        self._pred.append(p)
        self._gt.append(g)

    def report(self) -> DepthMetricsReport:
        if not self._pred:
            raise DataError("no depth samples accumulated")
        return depth_metrics(np.concatenate(self._pred), np.concatenate(self._gt))


def depth_metrics(pred, gt, valid=None) -> DepthMetricsReport:
    p, g = _depth_pixels(pred, gt, valid)
    ratio = np.maximum(p / g, g / p)
    diff = p - g
    d = np.log(p) - np.log(g)
    n = p.size
    mean_d = d.sum() / n
    # clamp roundoff; the exact value is a variance
    sie = max(float((d * d).sum() / n - mean_d * mean_d), 0.0)
    return DepthMetricsReport(
        delta1=float((ratio < THRESHOLDS[0]).sum() / n),
        delta2=float((ratio < THRESHOLDS[1]).sum() / n),
        delta3=float((ratio < THRESHOLDS[2]).sum() / n),
        ard=float((np.abs(diff) / g).sum() / n),
        srd=float((diff * diff / g).sum() / n),
        rmse_linear=float(np.sqrt((diff * diff).sum() / n)),
        rmse_log=float(np.sqrt((d * d).sum() / n)),
        sie=sie,
    )


def confusion_accumulate(pred_labels, gt_labels, num_classes: int,
                         ignore_label: int = IGNORE_LABEL) -> np.ndarray:
    """K×K counts, rows = ground truth, columns = prediction."""
    pred = np.asarray(pred_labels).reshape(-1).astype(np.int64)
    gt = np.asarray(gt_labels).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise DataError("prediction and ground truth differ in size")
    keep = gt != ignore_label
    pred, gt = pred[keep], gt[keep]
    if np.any((gt < 0) | (gt >= num_classes)) or np.any((pred < 0) | (pred >= num_classes)):
        raise DataError(f"label outside 0..{num_classes - 1}")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def seg_metrics(cm) -> SegMetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total <= 0:
        raise DataError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    union = rows + cols - np.diag(cm)
    has_gt = rows > 0
    has_union = union > 0
    per_class_iou = [float(tp[c] / union[c]) if has_union[c] else None for c in range(cm.shape[0])]
    return SegMetricsReport(
        global_acc=float(tp.sum() / total),
        class_acc=float(np.mean(tp[has_gt] / rows[has_gt])),
        mean_iou=float(np.mean(tp[has_union] / union[has_union])),
        per_class_iou=per_class_iou,
    )
