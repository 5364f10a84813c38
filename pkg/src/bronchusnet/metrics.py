"""Segmentation and classification scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .volgrid import as_mask


def dice_score(pred_mask, gt_mask) -> float:
    """Hard Dice overlap ``2|P & G| / (|P| + |G|)``; two empty masks score 1."""
    p = as_mask(pred_mask)
    g = as_mask(gt_mask)
    if p.shape != g.shape:
        raise ValueError(f"dims differ: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(pred_labels, gt_labels, n_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts nodes with true class ``t`` predicted as ``p``."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (gt, pred), 1)
    return cm


def classification_metrics(pred_labels, gt_labels, n_classes: int) -> MetricsReport:
    """Accuracy plus precision, recall and F1 macro-averaged over the classes
    present in ``gt_labels``. Per-class ratios with a zero denominator count
    as 0, and F1 is averaged per class rather than formed from the macro
    precision and recall.
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError("prediction and ground-truth label vectors must be 1D and equally long")
    if gt.size == 0:
        raise ValueError("cannot score an empty label set")
    if min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")

    cm = confusion_matrix(pred, gt, n_classes)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    actual = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)

    present = actual > 0
    return MetricsReport(
        accuracy=float(tp.sum() / gt.size),
        precision=float(precision[present].mean()),
        recall=float(recall[present].mean()),
        f1=float(f1[present].mean()),
    )
