"""Expected gradients: a sampling approximation of SHAP values against a background set."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import DataError, EmptyBackground
from .common import scores

M_STEPS = 64
BACKGROUND_SIZE = 16
MAGIC = b"CADRATTR"
FORMAT_VERSION = 1


@dataclass
class AttributionMap:
    values: np.ndarray          # channels x H x W, float64
    target_class: int
    convergence_gap: float
    f_input: float
    f_background: float         # mean target score over the whole background set
    m_steps: int = M_STEPS
    meta: dict = field(default_factory=dict)

    @property
    def relative_gap(self) -> float:
        delta = abs(self.f_input - self.f_background)
        return self.convergence_gap / delta if delta > 0 else float("inf") if self.convergence_gap else 0.0


class _Kahan:
    """Compensated running sum so the reduction order does not matter beyond rounding of the final value."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)

    def add(self, v):
        y = v - self.comp
        t = self.total + y
        self.comp = (t - self.total) - y
        self.total = t


def draw_plan(n_background: int, m_steps: int, rng):
    """Background indices (balanced: each used equally often when it divides ``m``) and stratified alphas."""
    idx = rng.permutation(np.resize(np.arange(n_background), m_steps))
    alphas = (rng.permutation(m_steps) + rng.random(m_steps)) / m_steps
    return idx, alphas


def _target_scores(model, x, target):
    return scores(model, x)[:, target]


def expected_gradients(model, data, background, target_class: int, m_steps: int = M_STEPS, rng=None,
                       batch: int = 32) -> AttributionMap:
    """``mean_j (x - b_j) * d f_target / dx (b_j + a_j (x - b_j))``.

    ``f_target`` is the target-class logit. The reported ``convergence_gap``
    is ``|sum(attribution) - (f(x) - mean_b f(b))|`` (completeness).
    """
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != 4 or len(background) == 0:
        raise EmptyBackground("expected-gradients background set is empty", stage="explain")
    x = np.asarray(data, dtype=np.float64)
    if background.shape[1:] != x.shape:
        raise DataError(f"background samples {background.shape[1:]} do not match input {x.shape}", stage="explain")
    rng = rng if rng is not None else np.random.default_rng(0)
    model.eval()
    idx, alphas = draw_plan(len(background), m_steps, rng)
    acc = _Kahan(x.shape)
    for start in range(0, m_steps, batch):
        bi, al = idx[start:start + batch], alphas[start:start + batch]
        diff = x[None] - background[bi]
        points = background[bi] + al[:, None, None, None] * diff
        inp = torch.tensor(points, requires_grad=True)
        out = _target_scores(model, inp, target_class)
        (grad,) = torch.autograd.grad(out.sum(), inp)
        contrib = diff * grad.detach().double().numpy()
        for v in contrib:
            acc.add(v)
    values = acc.total / m_steps
    with torch.no_grad():
        f_x = float(_target_scores(model, torch.tensor(x[None]), target_class)[0])
        f_b = float(_target_scores(model, torch.tensor(background), target_class).double().mean())
    gap = abs(float(values.sum()) - (f_x - f_b))
    return AttributionMap(values, int(target_class), gap, f_x, f_b, m_steps)


def select_background(samples, size: int = BACKGROUND_SIZE, seed: int = 0) -> np.ndarray:
    """``size`` training samples drawn without replacement from the seed's ``background`` stream."""
    from ..rng import substream
    if not samples:
        raise EmptyBackground("no training samples to draw a background from", stage="explain")
    idx = np.sort(substream(seed, "background").choice(len(samples), size=min(size, len(samples)), replace=False))
    return np.stack([samples[i].data for i in idx])


def save_attribution(path, amap: AttributionMap) -> None:
    """Flat binary: magic, uint32 version, uint32 header length, JSON header, float32 little-endian values."""
    header = {"format_version": FORMAT_VERSION, "shape": list(amap.values.shape), "dtype": "f32",
              "target_class": amap.target_class, "convergence_gap": amap.convergence_gap,
              "f_input": amap.f_input, "f_background": amap.f_background, "m_steps": amap.m_steps,
              "meta": amap.meta}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        fh.write(amap.values.astype("<f4").tobytes())


def load_attribution(path) -> AttributionMap:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path} is not an attribution file", stage="explain")
    _, hlen = struct.unpack("<II", data[8:16])
    h = json.loads(data[16:16 + hlen])
    values = np.frombuffer(data, dtype="<f4", offset=16 + hlen).reshape(h["shape"]).astype(np.float64)
    return AttributionMap(values, h["target_class"], h["convergence_gap"], h["f_input"], h["f_background"],
                          h["m_steps"], h["meta"])
