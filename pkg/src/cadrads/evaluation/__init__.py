"""Metrics, confidence intervals, paired AUC tests and a small comparator CNN."""

from .baseline import BaselineCNN, BaselineConfig
from .metrics import (MetricsReport, PredictionSet, accuracy_metric, aggregate_per_patient, bootstrap_ci,
                      confusion_matrix, delong_covariance, delong_test, metric_values, multiclass_report,
                      roc_auc, roc_curve, trapezoid_area)
from .predict import predict

__all__ = [
    "BaselineCNN", "BaselineConfig", "MetricsReport", "PredictionSet", "accuracy_metric",
    "aggregate_per_patient", "bootstrap_ci", "confusion_matrix", "delong_covariance", "delong_test",
    "metric_values", "multiclass_report", "predict", "roc_auc", "roc_curve", "trapezoid_area",
]
