"""Exact t-SNE and per-patient embedding export."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import PerplexityTooHigh
from ..rng import substream

EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
MOMENTUM_SWITCH = 250
LEARNING_RATE = 200.0
MIN_GAIN = 0.01


@dataclass
class PatientEmbeddings:
    patient_ids: list
    vectors: np.ndarray        # patients x D
    labels: list               # per patient, task label
    cadrads: list


@dataclass
class Embedding2D:
    patient_ids: list
    coords: np.ndarray
    kl: float
    kl_initial: float
    config: dict = field(default_factory=dict)


def export_embeddings(model, samples, task: str = "binary", batch: int = 64) -> PatientEmbeddings:
    """Mean pooled embedding per patient, rows sorted by patient id."""
    from ..training import predict_logits, stack_samples

    x, _ = stack_samples(samples, task)
    _, emb = predict_logits(model, x, batch)
    emb = emb.double().numpy()
    groups: dict = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.patient_id, []).append(i)
    ids = sorted(groups)
    first = {pid: samples[groups[pid][0]] for pid in ids}
    vectors = np.stack([emb[groups[pid]].mean(0) for pid in ids]) if ids else np.zeros((0, emb.shape[-1]))
    return PatientEmbeddings(ids, vectors, [first[p].label(task) for p in ids], [first[p].cadrads for p in ids])


def _sq_distances(x):
    sq = (x * x).sum(1)
    d = sq[:, None] + sq[None, :] - 2 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_probabilities(d2, perplexity: float, tol: float = 1e-5, max_iter: int = 200):
    """Row-wise Gaussian bandwidths by bisection on the precision so that ``H(P_i) = ln(perplexity)``."""
    n = len(d2)
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d2[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-(di - di.min()) * beta)
            s = w.sum()
            pi = w / s
            h = -(pi * np.log(np.maximum(pi, 1e-300))).sum()
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = beta / 2 if lo == 0.0 else (beta + lo) / 2
        p[i, np.arange(n) != i] = pi
    return p


def _kl(p, q):
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def _q_matrix(y):
    num = 1.0 / (1.0 + _sq_distances(y))
    np.fill_diagonal(num, 0.0)
    return num, np.maximum(num / num.sum(), 1e-12)


def tsne(embeddings, perplexity: float = 30.0, iters: int = 1000, seed: int = 0, ids=None) -> Embedding2D:
    """Exact t-SNE (no Barnes-Hut, no PCA pre-reduction).

    Perplexity above ``(n-1)/3`` is lowered to that bound with a warning.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if n < 4:
        raise PerplexityTooHigh(f"t-SNE needs at least 4 points, got {n}", stage="tsne")
    used = float(perplexity)
    if used > (n - 1) / 3:
        used = (n - 1) / 3
        warnings.warn(f"perplexity {perplexity} too high for {n} points; using {used:.3g}", stacklevel=2)
    p_cond = conditional_probabilities(_sq_distances(x), used)
    p = np.maximum((p_cond + p_cond.T) / (2 * n), 1e-12)

    y = substream(seed, "tsne", "init").normal(0.0, 1e-4, size=(n, 2))
    kl_initial = _kl(p, _q_matrix(y)[1])
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(iters):
        exag = EXAGGERATION if it < EXAGGERATION_ITERS else 1.0
        momentum = 0.5 if it < MOMENTUM_SWITCH else 0.8
        num, q = _q_matrix(y)
        pq = (exag * p - q) * num
        grad = 4.0 * (pq.sum(1)[:, None] * y - pq @ y)
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, MIN_GAIN)
        update = momentum * update - LEARNING_RATE * gains * grad
        y = y + update
        y = y - y.mean(0)
    kl = _kl(p, _q_matrix(y)[1])
    cfg = {"perplexity": used, "perplexity_requested": float(perplexity), "iters": iters, "seed": seed,
           "learning_rate": LEARNING_RATE, "early_exaggeration": EXAGGERATION,
           "exaggeration_iters": EXAGGERATION_ITERS}
    return Embedding2D(list(ids) if ids is not None else list(range(n)), y, kl, kl_initial, cfg)
