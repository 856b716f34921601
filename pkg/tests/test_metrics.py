import pytest
import os
import sys

import numpy as np

# Add parent directory to path to allow imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qdistill.core.data import generate_shapes_dataset
from qdistill.core.metrics import (
    accuracy_report,
    compare_reports,
    confusion_matrix,
    evaluate,
    mean_per_class_accuracy,
    per_class_accuracy,
)
from qdistill.core.models import build_student
from qdistill.exceptions import ConfigurationError, MetricsError


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 2, 1])
    assert mean_per_class_accuracy(labels, labels, 3) == 1.0
    assert np.array_equal(confusion_matrix(labels, labels, 3), np.diag([1, 2, 2]))


def test_constant_predictor_scores_one_over_classes():
    labels = np.repeat(np.arange(4), [50, 20, 5, 5])
    assert mean_per_class_accuracy(np.zeros_like(labels), labels, 4) == pytest.approx(0.25)


def test_majority_vote_on_imbalanced_labels():
    """Predicting the majority class of a 90/10 split is 90% accurate but only 50% per class."""
    labels = np.array([0] * 90 + [1] * 10)
    report = accuracy_report(np.zeros(100, dtype=int), labels, 2)
    assert report["accuracy"] == pytest.approx(0.9)
    assert report["mean_per_class_accuracy"] == pytest.approx(0.5)
    assert report["per_class_accuracy"] == [1.0, 0.0]
    assert report["confusion"] == [[90, 0], [10, 0]]
    assert report["samples"] == 100


def test_absent_classes_are_skipped():
    labels = np.array([0, 0, 2])
    preds = np.array([0, 1, 2])
    per_class = per_class_accuracy(preds, labels, 3)
    assert np.isnan(per_class[1])
    assert mean_per_class_accuracy(preds, labels, 3) == pytest.approx(0.75)
    assert accuracy_report(preds, labels, 3)["per_class_accuracy"] == [0.5, None, 1.0]


def test_metric_errors():
    with pytest.raises(MetricsError):
        mean_per_class_accuracy([], [], 3)
    with pytest.raises(MetricsError):
        mean_per_class_accuracy([0, 1], [0], 3)
    with pytest.raises(MetricsError):
        mean_per_class_accuracy([0, 3], [0, 1], 3)


def test_compare_reports():
    a = {"per_class_accuracy": [0.5, 1.0, None], "mean_per_class_accuracy": 0.75}
    b = {"per_class_accuracy": [0.75, 0.5, 1.0], "mean_per_class_accuracy": 0.75}
    diff = compare_reports(a, b)
    assert diff["per_class_delta"] == [0.25, -0.5, None]
    assert (diff["improved"], diff["declined"]) == (1, 1)
    assert diff["mean_per_class_delta"] == 0.0
    with pytest.raises(ConfigurationError):
        compare_reports(a, {"per_class_accuracy": [1.0], "mean_per_class_accuracy": 1.0})


def test_evaluate_checks_class_count():
    _, _, test = generate_shapes_dataset(4, [10, 10, 10, 10], seed=0)
    report = evaluate(build_student(4, 0.5), test)
    assert report["samples"] == len(test)
    assert 0.0 <= report["mean_per_class_accuracy"] <= 1.0
    with pytest.raises(ConfigurationError):
        evaluate(build_student(5, 0.5), test)
