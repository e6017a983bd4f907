"""JSON and CSV writers for evaluation outputs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .metrics import MetricsReport, PredictionSet


def write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_csv(path, reports) -> None:
    """One row per (level, metric) with the point value and its 95% CI."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "metric", "value", "ci_lo", "ci_hi", "n"])
        for rep in reports:
            for name in sorted(rep.values):
                lo, hi = rep.ci[name]
                w.writerow([rep.level, name, repr(rep.values[name]), repr(lo), repr(hi), rep.n])


def write_roc_csv(path, fpr, tpr, thresholds) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for a, b, t in zip(fpr, tpr, thresholds):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(t))])


def write_predictions_csv(path, preds: PredictionSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "view", "label", "predicted"] + [f"p{k}" for k in range(preds.k)])
        for i in range(len(preds)):
            w.writerow([preds.patient_ids[i], preds.views[i], int(preds.labels[i]), int(preds.predicted[i])]
                       + [repr(float(p)) for p in preds.probs[i]])


def report_doc(reports: list[MetricsReport], extra: dict | None = None) -> dict:
    return {**(extra or {}), "reports": {r.level: r.to_dict() for r in reports}}
