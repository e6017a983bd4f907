"""Classification metrics, bootstrap confidence intervals and the DeLong test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import DataError, DegenerateResample, EmptyClass, OneClassOnly
from ..rng import substream

N_RESAMPLES = 2000
MAX_SKIPPED = 0.10


@dataclass
class PredictionSet:
    """Per-row class probabilities; rows are images or (after aggregation) patients."""

    patient_ids: list
    views: list
    probs: np.ndarray       # N x K
    labels: np.ndarray      # N
    task: str = "binary"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.patient_ids)
        if self.probs.ndim != 2 or len(self.probs) != n or len(self.labels) != n or len(self.views) != n:
            raise DataError("prediction columns have inconsistent lengths", stage="evaluation")
        if n and ((self.probs < 0).any() or np.abs(self.probs.sum(1) - 1).max() > 1e-6):
            raise DataError("probability rows must be non-negative and sum to 1", stage="evaluation")

    def __len__(self):
        return len(self.patient_ids)

    @property
    def k(self) -> int:
        return self.probs.shape[1]

    @property
    def predicted(self) -> np.ndarray:
        return self.probs.argmax(1)

    def subset(self, idx) -> "PredictionSet":
        idx = np.asarray(idx)
        return PredictionSet([self.patient_ids[i] for i in idx], [self.views[i] for i in idx],
                             self.probs[idx], self.labels[idx], self.task)


def aggregate_per_patient(preds: PredictionSet) -> PredictionSet:
    """One row per patient (sorted id) holding the mean of its image probabilities."""
    groups: dict = {}
    for i, pid in enumerate(preds.patient_ids):
        groups.setdefault(pid, []).append(i)
    ids = sorted(groups)
    probs, labels = [], []
    for pid in ids:
        rows = groups[pid]
        lab = set(preds.labels[rows].tolist())
        if len(lab) != 1:
            raise DataError(f"patient {pid} has conflicting labels {sorted(lab)}", stage="evaluation")
        probs.append(preds.probs[rows].mean(0))
        labels.append(lab.pop())
    probs = np.array(probs).reshape(len(ids), preds.k)
    return PredictionSet(ids, [-1] * len(ids), probs, np.array(labels, dtype=np.int64), preds.task)


# --------------------------------------------------------------------------- #
# ROC
# --------------------------------------------------------------------------- #

def _split_classes(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise OneClassOnly("AUC needs both positive and negative samples", stage="evaluation")
    return pos, neg


def roc_auc(scores, labels) -> float:
    """Mann-Whitney U / (n+ n-), ties counted as one half (via midranks)."""
    pos, neg = _split_classes(scores, labels)
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    m, n = len(pos), len(neg)
    return float((ranks[:m].sum() - m * (m + 1) / 2) / (m * n))


def roc_curve(scores, labels):
    """``(fpr, tpr, thresholds)``; one point per distinct score plus the (0, 0) origin."""
    _split_classes(scores, labels)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    thresholds = np.r_[np.inf, s[last]]
    return fpr, tpr, thresholds


def trapezoid_area(fpr, tpr) -> float:
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


# --------------------------------------------------------------------------- #
# per-class metrics
# --------------------------------------------------------------------------- #

def confusion_matrix(labels, predicted, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predicted)), 1)
    return cm


def _safe_div(a, b):
    return np.divide(a, b, out=np.zeros_like(a, dtype=np.float64), where=b > 0)


def metric_values(labels, probs) -> dict:
    """Flat ``{name: value}`` over accuracy, per-class and weighted-average metrics.

    Precision of a never-predicted class is 0. A class with no support makes
    its AUC and the weighted average undefined, which raises ``EmptyClass``.
    """
    labels = np.asarray(labels)
    probs = np.asarray(probs)
    k = probs.shape[1]
    pred = probs.argmax(1)
    cm = confusion_matrix(labels, pred, k)
    support = cm.sum(1)
    if (support == 0).any():
        raise EmptyClass(f"class(es) {np.flatnonzero(support == 0).tolist()} have no support", stage="evaluation")
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(0).astype(np.float64))
    recall = tp / support
    f1 = _safe_div(2 * precision * recall, precision + recall)
    auc = np.array([roc_auc(probs[:, c], labels == c) for c in range(k)])
    w = support / support.sum()
    out = {"accuracy": float(tp.sum() / len(labels))}
    for name, arr in (("auc", auc), ("precision", precision), ("recall", recall), ("f1", f1)):
        for c in range(k):
            out[f"class{c}.{name}"] = float(arr[c])
        out[f"weighted.{name}"] = float((w * arr).sum())
    return out


# --------------------------------------------------------------------------- #
# bootstrap
# --------------------------------------------------------------------------- #

def _percentile_ci(values, point, alpha):
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    # the percentile interval need not contain the estimate; widen it so it does
    return float(min(lo, point)), float(max(hi, point))


def _resample_indices(n, n_resamples, seed, name):
    return substream(seed, "bootstrap", name).integers(0, n, size=(n_resamples, n))


def bootstrap_ci(preds: PredictionSet, metric, n_resamples: int = N_RESAMPLES, seed: int = 0,
                 alpha: float = 0.05, name: str = "metric"):
    """Percentile CI of ``metric(labels, probs)`` resampling rows with replacement.

    Resamples where the metric is undefined are skipped; more than 10 %
    skipped raises ``DegenerateResample``. Returns ``(lo, hi, n_skipped)``.
    """
    n = len(preds)
    if n < 2:
        raise DataError("bootstrap needs at least two rows", stage="evaluation")
    point = metric(preds.labels, preds.probs)
    values, skipped = [], 0
    for idx in _resample_indices(n, n_resamples, seed, name):
        try:
            values.append(metric(preds.labels[idx], preds.probs[idx]))
        except (OneClassOnly, EmptyClass, DegenerateResample):
            skipped += 1
    if skipped > MAX_SKIPPED * n_resamples:
        raise DegenerateResample(f"{skipped}/{n_resamples} resamples left the metric undefined",
                                 stage="evaluation")
    lo, hi = _percentile_ci(np.array(values), point, alpha)
    return lo, hi, skipped


def accuracy_metric(labels, probs) -> float:
    return float((np.asarray(probs).argmax(1) == np.asarray(labels)).mean())


@dataclass
class MetricsReport:
    level: str
    task: str
    n: int
    values: dict            # name -> point estimate
    ci: dict                # name -> (lo, hi)
    support: list
    skipped: int = 0

    def to_dict(self) -> dict:
        return {"level": self.level, "task": self.task, "n": self.n, "support": self.support,
                "bootstrap_skipped": self.skipped,
                "metrics": {k: {"value": v, "ci95": list(self.ci[k])} for k, v in sorted(self.values.items())}}

    @property
    def auc(self) -> float:
        """Headline AUC: positive class for binary, weighted one-vs-rest for multi."""
        return self.values["class1.auc"] if self.task == "binary" else self.values["weighted.auc"]


def multiclass_report(preds: PredictionSet, level: str = "image", n_resamples: int = N_RESAMPLES,
                      seed: int = 0, alpha: float = 0.05) -> MetricsReport:
    """Point metrics plus percentile-bootstrap CIs sharing one set of resamples.

    At patient level each row is a patient, so resampling rows resamples
    patients.
    """
    values = metric_values(preds.labels, preds.probs)
    samples = {k: [] for k in values}
    skipped = 0
    if n_resamples:
        for idx in _resample_indices(len(preds), n_resamples, seed, level):
            try:
                v = metric_values(preds.labels[idx], preds.probs[idx])
            except (OneClassOnly, EmptyClass):
                skipped += 1
                continue
            for k in values:
                samples[k].append(v[k])
        if skipped > MAX_SKIPPED * n_resamples:
            raise DegenerateResample(f"{skipped}/{n_resamples} resamples lost a class", stage="evaluation")
        ci = {k: _percentile_ci(np.array(samples[k]), values[k], alpha) for k in values}
    else:
        ci = {k: (values[k], values[k]) for k in values}
    support = np.bincount(preds.labels, minlength=preds.k).tolist()
    return MetricsReport(level, preds.task, len(preds), values, ci, support, skipped)


# --------------------------------------------------------------------------- #
# DeLong
# --------------------------------------------------------------------------- #

def _structural_components(scores, labels):
    """AUC and the per-positive / per-negative placement values via midranks."""
    pos, neg = _split_classes(scores, labels)
    m, n = len(pos), len(neg)
    tx = stats.rankdata(pos)
    ty = stats.rankdata(neg)
    tz = stats.rankdata(np.concatenate([pos, neg]))
    auc = (tz[:m].sum() - m * (m + 1) / 2) / (m * n)
    v10 = (tz[:m] - tx) / n            # fraction of negatives below each positive
    v01 = 1.0 - (tz[m:] - ty) / m      # fraction of positives above each negative
    return auc, v10, v01


def delong_covariance(score_sets, labels):
    """AUCs and their covariance ``S10/m + S01/n`` for several classifiers on the same labels."""
    comps = [_structural_components(s, labels) for s in score_sets]
    aucs = np.array([c[0] for c in comps])
    v10 = np.stack([c[1] for c in comps])
    v01 = np.stack([c[2] for c in comps])
    m, n = v10.shape[1], v01.shape[1]
    s10 = np.atleast_2d(np.cov(v10)) if m > 1 else np.zeros((len(comps), len(comps)))
    s01 = np.atleast_2d(np.cov(v01)) if n > 1 else np.zeros((len(comps), len(comps)))
    return aucs, s10 / m + s01 / n


def delong_test(scores_a, scores_b, labels) -> dict:
    """Two-sided paired test of ``AUC_a == AUC_b``; zero variance gives ``p = 1``."""
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    if scores_a.shape != scores_b.shape or len(scores_a) != len(labels):
        raise DataError("score vectors and labels must have equal length", stage="evaluation")
    aucs, cov = delong_covariance([scores_a, scores_b], labels)
    var = cov[0, 0] + cov[1, 1] - 2 * cov[0, 1]
    diff = aucs[0] - aucs[1]
    if np.array_equal(scores_a, scores_b) or var <= 0:
        z, p = 0.0, 1.0
    else:
        z = float(diff / np.sqrt(var))
        p = float(2 * stats.norm.sf(abs(z)))
    return {"auc_a": float(aucs[0]), "auc_b": float(aucs[1]), "z": z, "p": p, "variance": float(max(var, 0.0))}
