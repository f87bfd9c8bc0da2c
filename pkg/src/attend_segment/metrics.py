"""Pixel accuracy and IoU for ``H x W x K`` class-score maps."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def _labels(pred_seg) -> np.ndarray:
    pred = np.asarray(pred_seg)
    return pred.argmax(axis=-1)


def confusion_matrix(pred_labels, label, num_classes: int) -> np.ndarray:
    """``cm[i, j]`` counts pixels of true class ``i`` predicted as ``j``."""
    label = np.asarray(label).reshape(-1).astype(np.int64)
    pred = np.asarray(pred_labels).reshape(-1).astype(np.int64)
    return np.bincount(num_classes * label + pred, minlength=num_classes ** 2) \
        .reshape(num_classes, num_classes)


def pixel_accuracy(pred_seg, label) -> float:
    pred = _labels(pred_seg)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"prediction {pred.shape} and label {label.shape} differ")
    return float((pred == label).mean())


def mean_iou(pred_seg, label, num_classes: int) -> tuple[list[float], float]:
    """Per-class IoU and their mean over classes present in pred or label.

    Classes absent from both get ``nan`` in the per-class list.
    """
    pred = _labels(pred_seg)
    if pred.shape != np.shape(label):
        raise ValueError(f"prediction {pred.shape} and label {np.shape(label)} differ")
    cm = confusion_matrix(pred, label, num_classes)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = union > 0
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return [float(v) for v in iou], mean


def upscale_eval(pred_seg, target_h: int, target_w: int) -> np.ndarray:
    """Bilinearly resize an ``H x W x K`` map to ``target_h x target_w x K``."""
    pred = np.asarray(pred_seg)
    h, w, _ = pred.shape
    if target_h < h or target_w < w:
        raise ValueError("upscale_eval only enlarges")
    if (target_h, target_w) == (h, w):
        return pred.copy()
    t = torch.from_numpy(np.ascontiguousarray(pred.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=(target_h, target_w), mode="bilinear", align_corners=False)
    return out[0].numpy().transpose(1, 2, 0)
