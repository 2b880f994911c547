"""Confusion-matrix accumulation and mean intersection-over-union."""

from __future__ import annotations

import numpy as np
import torch

IGNORE_INDEX = 255


def new_confusion(num_classes: int) -> np.ndarray:
    """Fresh [K, K] count matrix; rows are ground truth, columns predictions."""
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate_confusion(conf: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Add one prediction/ground-truth pair's pixel counts into ``conf`` (in place).

    Accumulation is associative over images, so shards can be merged by
    adding matrices.  Pixels whose ground truth equals the reserved ignore
    value 255 are skipped.
    """
    k = conf.shape[0]
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and ground truth differ in size: {pred.shape} vs {gt.shape}")
    keep = gt != IGNORE_INDEX
    pred, gt = pred[keep], gt[keep]
    if gt.size and (gt.min() < 0 or gt.max() >= k or pred.min() < 0 or pred.max() >= k):
        raise ValueError(f"class values out of range [0, {k})")
    conf += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
    return conf


def miou(conf: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean IoU over classes with non-zero union, plus the per-class vector.

    Classes absent from both ground truth and predictions get NaN in the
    per-class vector and are excluded from the mean.
    """
    diag = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=1) + conf.sum(axis=0) - diag
    valid = union > 0
    if not valid.any():
        raise ValueError("mIoU undefined: every class has zero union")
    per_class = np.full(conf.shape[0], np.nan)
    per_class[valid] = diag[valid] / union[valid]
    return float(per_class[valid].mean()), per_class


def pixel_accuracy(conf: np.ndarray) -> float:
    total = conf.sum()
    return float(np.diag(conf).sum() / total) if total else float("nan")


@torch.no_grad()
def evaluate_student(model, images: np.ndarray, masks: np.ndarray, batch_size: int = 16) -> dict:
    """Single-scale evaluation of one student over an image stack.

    Returns {"miou", "per_class", "pixel_acc"} computed from one confusion
    matrix accumulated over all images.
    """
    num_classes = model.config.num_classes
    conf = new_confusion(num_classes)
    for start in range(0, images.shape[0], batch_size):
        batch = torch.from_numpy(images[start : start + batch_size])
        pred = model(batch).pseudo_labels.numpy()
        accumulate_confusion(conf, pred, masks[start : start + batch_size])
    mean, per_class = miou(conf)
    return {"miou": mean, "per_class": per_class, "pixel_acc": pixel_accuracy(conf)}


def evaluate_pair(conv_model, attn_model, images: np.ndarray, masks: np.ndarray, batch_size: int = 16) -> dict:
    """Evaluate both students on the same set; keys suffixed _cnn / _vit."""
    report: dict = {}
    for suffix, model in (("cnn", conv_model), ("vit", attn_model)):
        single = evaluate_student(model, images, masks, batch_size)
        report[f"miou_{suffix}"] = single["miou"]
        report[f"per_class_{suffix}"] = single["per_class"]
        report[f"pixel_acc_{suffix}"] = single["pixel_acc"]
    return report
