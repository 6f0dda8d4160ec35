from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError
from .models import SegmentationScores


def _binary(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise DomainError(f"{name} must be a binary mask")
    return mask


def segmentation_metrics(pred_masks: np.ndarray, gt_masks: np.ndarray) -> SegmentationScores:
    """Micro-averaged scores; the positive class is the adversarial pixel (mask value 0).

    With no predicted positives precision is reported as 0 (1 when there was nothing to
    find either) and flagged as undefined.
    """
    pred = _binary(pred_masks, "prediction")
    gt = _binary(gt_masks, "ground truth")
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {list(pred.shape)} and ground truth {list(gt.shape)} differ")
    pred_pos, gt_pos = pred == 0, gt == 0
    tp = int(np.count_nonzero(pred_pos & gt_pos))
    fp = int(np.count_nonzero(pred_pos & ~gt_pos))
    fn = int(np.count_nonzero(~pred_pos & gt_pos))
    total = int(pred.size)

    defined = tp + fp > 0
    if defined:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if fn == 0 else 0.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    accuracy = (total - fp - fn) / total if total else 1.0
    return SegmentationScores(precision=precision, recall=recall, accuracy=accuracy, f1=f1, precision_defined=defined)


def top1_accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if labels.size == 0:
        raise ShapeError("accuracy of an empty set")
    return float(np.count_nonzero(predictions == labels)) / labels.size


def zero_fraction(masks: np.ndarray) -> float:
    """Fraction of pixels flagged adversarial."""
    masks = _binary(masks, "mask")
    return float(np.count_nonzero(masks == 0)) / masks.size if masks.size else 0.0
