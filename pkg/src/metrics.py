"""
Evaluation metrics: task performance, label-correction quality and weight diagnostics.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np
from sklearn.metrics import accuracy_score, mean_squared_error, roc_auc_score

from .core import LabelQualityParams, ModelSpec, PlantedTruth, WeakDataset
from .logging_config import get_logger
from .model import ThetaLike, check_task, predict

logger = get_logger(__name__)


class MetricKind(str, Enum):
    ACCURACY = "accuracy"
    MEAN_SQUARED_ERROR = "mse"
    CORRECTION_F1 = "correction_f1"
    WEIGHT_AUC = "weight_auc"


UNIT_INTERVAL_METRICS = (MetricKind.ACCURACY, MetricKind.CORRECTION_F1, MetricKind.WEIGHT_AUC)


@dataclass(frozen=True)
class Metric:
    kind: MetricKind
    value: float

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"{self.kind.value} is not finite")
        if self.kind in UNIT_INTERVAL_METRICS and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"{self.kind.value} must lie in [0, 1], got {self.value}")
        if self.kind == MetricKind.MEAN_SQUARED_ERROR and self.value < 0:
            raise ValueError("mse must be non-negative")


def task_metric(d: WeakDataset) -> MetricKind:
    """Accuracy for classification, MSE for regression."""
    return MetricKind.ACCURACY if d.task.is_classification else MetricKind.MEAN_SQUARED_ERROR


def evaluate(spec: ModelSpec, theta: ThetaLike, test: WeakDataset, metric: MetricKind) -> Metric:
    """
    Score a model on a labeled test set.

    Args:
        spec: Model description
        theta: Parameters
        test: Test set (labels are taken as clean)
        metric: ACCURACY (classification) or MEAN_SQUARED_ERROR (regression)

    Returns:
        Metric value

    Raises:
        ValueError: If the test set is empty or the metric does not fit the task
    """
    if test.n == 0:
        raise ValueError("Cannot evaluate on an empty test set")
    check_task(spec, test.task)
    if metric == MetricKind.ACCURACY:
        if not test.task.is_classification:
            raise ValueError("accuracy needs a classification task")
        predictions = np.argmax(predict(spec, theta, test.features), axis=1)
        return Metric(metric, float(accuracy_score(test.labels, predictions)))
    if metric == MetricKind.MEAN_SQUARED_ERROR:
        if test.task.is_classification:
            raise ValueError("mse needs a regression task")
        return Metric(metric, float(mean_squared_error(test.labels, predict(spec, theta, test.features))))
    raise ValueError(f"{metric.value} is not a test-set metric")


def correction_f1(proposed_labels: np.ndarray, is_correction: np.ndarray, truth: PlantedTruth) -> Metric:
    """
    F1 of label corrections against the planted corruption.

    A true positive is a proposed change whose new label equals the clean label on an
    instance that was actually corrupted. Precision divides by the number of proposals,
    recall by the number of corrupted instances; F1 is 0 when either is undefined.
    """
    proposed_labels = np.asarray(proposed_labels)
    is_correction = np.asarray(is_correction, dtype=bool)
    if proposed_labels.shape != truth.true_labels.shape or is_correction.shape != truth.corruption_mask.shape:
        raise ValueError("proposals and truth differ in length")

    hits = is_correction & truth.corruption_mask & (proposed_labels == truth.true_labels)
    tp = int(hits.sum())
    n_proposed = int(is_correction.sum())
    n_corrupted = int(truth.corruption_mask.sum())
    if tp == 0 or n_proposed == 0 or n_corrupted == 0:
        return Metric(MetricKind.CORRECTION_F1, 0.0)
    precision = tp / n_proposed
    recall = tp / n_corrupted
    return Metric(MetricKind.CORRECTION_F1, 2 * precision * recall / (precision + recall))


def weight_auc(p: LabelQualityParams, truth: PlantedTruth) -> Metric:
    """AUC of −w as a score for the corruption mask (0.5 when only one class is present)."""
    mask = truth.corruption_mask
    if mask.shape != p.w.shape:
        raise ValueError("weights and truth differ in length")
    if mask.all() or not mask.any():
        logger.warning("weight_auc is undefined with a single-class corruption mask; reporting 0.5")
        return Metric(MetricKind.WEIGHT_AUC, 0.5)
    return Metric(MetricKind.WEIGHT_AUC, float(roc_auc_score(mask, -p.w)))
