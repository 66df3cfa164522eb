"""Pixel accuracy and (mean) intersection-over-union for label maps."""

from __future__ import annotations

import numpy as np

from .fixed_point import FxTensor

N_CLASSES = 4
CLASS_NAMES = ("background", "road", "car", "person")


class MetricError(ValueError):
    pass


def decode(logits: FxTensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax over channels; ties go to the lowest class index."""
    data = logits.mantissas if isinstance(logits, FxTensor) else np.asarray(logits)
    return np.argmax(data, axis=0)  # numpy returns the first maximum


def confusion_matrix(truth, pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    truth = np.asarray(truth).ravel()
    pred = np.asarray(pred).ravel()
    if truth.shape != pred.shape:
        raise MetricError(f"label maps differ in size: {truth.size} vs {pred.size}")
    for name, arr in (("truth", truth), ("prediction", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise MetricError(f"{name} labels must lie in [0, {n_classes})")
    idx = truth.astype(np.int64) * n_classes + pred.astype(np.int64)
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise MetricError("empty confusion matrix")
    return float(np.trace(cm) / total)


def class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN for classes absent from both truth and prediction."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def miou(cm: np.ndarray, strict: bool = False) -> float:
    """Mean IoU over classes present in truth or prediction.

    With ``strict`` absent classes count as IoU 0 instead of being skipped.
    """
    ious = class_iou(cm)
    if strict:
        return float(np.nan_to_num(ious, nan=0.0).mean())
    present = ious[~np.isnan(ious)]
    if present.size == 0:
        raise MetricError("mIoU undefined: no class occurs in truth or prediction")
    return float(present.mean())
