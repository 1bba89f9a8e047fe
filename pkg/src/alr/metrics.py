"""Confusion-matrix segmentation metrics."""

from __future__ import annotations

import csv

import numpy as np


def confusion(pred, gt, class_count: int) -> np.ndarray:
    """``C x C`` counts, rows = ground truth, columns = prediction.

    ``pred`` and ``gt`` may be single maps or equally long sequences of maps.
    """
    if isinstance(pred, (list, tuple)) or isinstance(gt, (list, tuple)):
        if len(pred) != len(gt):
            raise ValueError("prediction and ground-truth lists differ in length")
        cm = np.zeros((class_count, class_count), dtype=np.int64)
        for p, g in zip(pred, gt):
            cm += confusion(p, g, class_count)
        return cm
    p = np.asarray(pred).astype(np.int64).ravel()
    g = np.asarray(gt).astype(np.int64).ravel()
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"shape mismatch: {np.shape(pred)} vs {np.shape(gt)}")
    for name, a in (("prediction", p), ("ground truth", g)):
        if a.size and (a.min() < 0 or a.max() >= class_count):
            raise ValueError(f"{name} class id out of range [0, {class_count})")
    return np.bincount(g * class_count + p, minlength=class_count ** 2).reshape(
        class_count, class_count)


def miou(cm: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean IoU over classes present in ground truth or prediction.

    Absent classes get ``nan`` in the per-class vector and are left out of
    the mean.
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise ValueError("no classes present")
    iou = np.full(len(tp), np.nan)
    iou[present] = tp[present] / union[present]
    return float(iou[present].mean()), iou


def write_iou_csv(path, cm: np.ndarray, class_names) -> None:
    _, iou = miou(cm)
    gt_pixels = cm.sum(axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "class_name", "iou", "gt_pixels"])
        for c, name in enumerate(class_names):
            w.writerow([c, name, "" if np.isnan(iou[c]) else repr(float(iou[c])), int(gt_pixels[c])])
