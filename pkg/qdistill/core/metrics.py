"""Class-balanced accuracy metrics and report assembly."""
from logging import getLogger
from typing import Any, Dict, Union

import numpy as np

from qdistill.exceptions import ConfigurationError, MetricsError

logger = getLogger(__name__)


def _check(preds: np.ndarray, labels: np.ndarray, num_classes: int):
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size == 0:
        raise MetricsError("cannot compute accuracy of an empty prediction set")
    if preds.shape != labels.shape:
        raise MetricsError(f"{preds.size} predictions for {labels.size} labels")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise MetricsError(f"labels must lie in [0, {num_classes})")
    if preds.min() < 0 or preds.max() >= num_classes:
        raise MetricsError(f"predictions must lie in [0, {num_classes})")
    return preds, labels


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """counts[true, predicted]."""
    preds, labels = _check(preds, labels, num_classes)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return counts


def per_class_accuracy(preds, labels, num_classes: int) -> np.ndarray:
    """Recall of every class; NaN for classes absent from labels."""
    counts = confusion_matrix(preds, labels, num_classes)
    totals = counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, np.diag(counts) / np.maximum(totals, 1), np.nan)


def mean_per_class_accuracy(preds, labels, num_classes: int) -> float:
    """Mean recall over the classes present in labels."""
    return float(np.nanmean(per_class_accuracy(preds, labels, num_classes)))


def accuracy_report(preds, labels, num_classes: int) -> Dict[str, Any]:
    """JSON-ready report. Keys: mean_per_class_accuracy, accuracy, per_class_accuracy, confusion, samples."""
    preds, labels = _check(preds, labels, num_classes)
    per_class = per_class_accuracy(preds, labels, num_classes)
    return {
        "mean_per_class_accuracy": float(np.nanmean(per_class)),
        "accuracy": float((preds == labels).mean()),
        "per_class_accuracy": [None if np.isnan(a) else float(a) for a in per_class],
        "confusion": confusion_matrix(preds, labels, num_classes).tolist(),
        "samples": int(labels.size),
    }


def predict(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class predictions of a float or quantized model on canvas images (center crops)."""
    from qdistill.core.data import augment_batch
    from qdistill.core.int8_infer import QuantizedModel, predict_quantized_logits
    from qdistill.core.nn import predict_logits

    crops = augment_batch(images, train=False)
    if isinstance(model, QuantizedModel):
        logits = predict_quantized_logits(model, crops, batch_size)
    else:
        logits = predict_logits(model, crops, batch_size)
    return logits.argmax(axis=1)


def evaluate(model, split, batch_size: int = 256) -> Dict[str, Any]:
    """accuracy_report of model on a DatasetSplit."""
    if model.num_classes != split.num_classes:
        raise ConfigurationError(f"model predicts {model.num_classes} classes, split has {split.num_classes}")
    return accuracy_report(predict(model, split.images, batch_size), split.labels, split.num_classes)


def compare_reports(report_a: Dict[str, Any], report_b: Dict[str, Any]) -> Dict[str, Union[list, int, float]]:
    """Per-class delta of b over a, with improved/declined counts."""
    a, b = report_a["per_class_accuracy"], report_b["per_class_accuracy"]
    if len(a) != len(b):
        raise ConfigurationError(f"reports cover {len(a)} and {len(b)} classes")
    delta = [None if x is None or y is None else y - x for x, y in zip(a, b)]
    present = [d for d in delta if d is not None]
    return {
        "per_class_delta": delta,
        "improved": sum(1 for d in present if d > 0),
        "declined": sum(1 for d in present if d < 0),
        "mean_per_class_delta": report_b["mean_per_class_accuracy"] - report_a["mean_per_class_accuracy"],
    }
