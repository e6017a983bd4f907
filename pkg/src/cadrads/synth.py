"""Procedural straightened-vessel images with controllable stenosis.

A vessel is a bright vertical tube on a dark speckled scan area surrounded
by a black border.  Lesions narrow the tube by a fraction equal to their
severity; severity 1 cuts it completely.  Diseased vessels of a patient are
the only ones written to disk for CAD-RADS > 0, mirroring how clinical
exports omit healthy arteries.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from .rng import substream

VESSELS = ("LAD", "LCX", "RCA")
DEFAULT_DISTRIBUTION = (0.25, 0.15, 0.15, 0.20, 0.17, 0.08)

# severity bands per CAD-RADS score, sampled uniformly
_BANDS = {1: (0.05, 0.25), 2: (0.25, 0.5), 3: (0.5, 0.7), 4: (0.7, 0.98), 5: (1.0, 1.0)}


@dataclass
class SynthConfig:
    n_patients: int = 120
    cadrads_distribution: tuple = DEFAULT_DISTRIBUTION
    image_height: int = 128
    image_width: int = 64
    vessel_width: float = 14.0
    noise: float = 8.0
    views_per_vessel: int = 8
    glyph_probability: float = 0.3
    seed: int = 0

    def __post_init__(self):
        from .errors import ConfigError

        self.cadrads_distribution = tuple(float(p) for p in self.cadrads_distribution)
        if len(self.cadrads_distribution) != 6 or min(self.cadrads_distribution) < 0:
            raise ConfigError("cadrads_distribution needs 6 non-negative probabilities")
        if abs(sum(self.cadrads_distribution) - 1.0) > 1e-9:
            raise ConfigError("cadrads_distribution must sum to 1")
        if not 0 < self.vessel_width < self.image_width / 2:
            raise ConfigError("vessel_width must be positive and below half the image width")
        if self.n_patients < 1 or not 1 <= self.views_per_vessel <= 8:
            raise ConfigError("n_patients >= 1 and 1 <= views_per_vessel <= 8 required")


@dataclass
class Lesion:
    position: float          # fraction of image height
    severity: float
    phase: float             # eccentricity phase, radians


@dataclass
class VesselTruth:
    severity: float
    lesions: list = field(default_factory=list)


def severity_to_cadrads(severities) -> int:
    s = max(float(v) for v in severities)
    if s <= 0.0:
        return 0
    if s < 0.25:
        return 1
    if s < 0.5:
        return 2
    if s < 0.7:
        return 3
    if s < 1.0:
        return 4
    return 5


def _lesion_bump(y, center, plateau, taper):
    d = np.abs(y - center)
    bump = np.where(d <= plateau, 1.0, 0.0)
    ramp = (d > plateau) & (d < plateau + taper)
    bump = np.where(ramp, np.cos(0.5 * math.pi * (d - plateau) / taper) ** 2, bump)
    return bump


def render_vessel(severity, width, size, view_angle, rng, lesions=None, noise=8.0):
    """Render one view; returns ``(image, tube_mask, lesions)``.

    ``lesions`` fixes the lesion set so that all views of one vessel share
    it; when omitted one or two lesions are drawn for ``severity > 0``.
    """
    h, w = size
    if lesions is None:
        lesions = sample_lesions(severity, rng)

    border = max(2, int(round(0.05 * min(h, w))))
    img = np.zeros((h, w))
    scan = (slice(border, h - border), slice(border, w - border))
    img[scan] = 18.0 + np.abs(rng.normal(0.0, 1.0, (h - 2 * border, w - 2 * border))) * noise

    y = np.arange(h, dtype=np.float64)
    amp = 0.08 * w
    center = w / 2.0 + amp * np.sin(2 * math.pi * y / (0.8 * h) + view_angle)
    left = center - width / 2.0
    right = center + width / 2.0
    for les in lesions:
        bump = _lesion_bump(y, les.position * h, 0.04 * h, 0.06 * h)
        delta = 0.5 * width * les.severity * bump
        ecc = 0.5 * math.cos(view_angle + les.phase)
        left = left + delta * (1 + ecc)
        right = right - delta * (1 - ecc)

    x = np.arange(w, dtype=np.float64)[None, :] + 0.5
    half = (right - left)[:, None] / 2.0
    mid = ((right + left) / 2.0)[:, None]
    dist = np.abs(x - mid)
    tube = (half > 1e-6) & (dist <= half)
    tube[:border] = False
    tube[h - border:] = False
    profile = np.sqrt(np.clip(1.0 - (dist / np.maximum(half, 1e-6)) ** 2, 0.0, 1.0))
    img = np.where(tube, 150.0 + 60.0 * profile, img)
    img = img + np.where(tube, rng.normal(0.0, 0.5, img.shape) * noise, 0.0)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), tube, lesions


def add_glyph(img, rng):
    """Stamp a small bright annotation mark into a corner of the scan area."""
    h, w = img.shape
    gh, gw = max(4, h // 16), max(3, w // 12)
    border = max(2, int(round(0.05 * min(h, w)))) + 1
    top = border if rng.random() < 0.5 else h - border - gh
    left = border if rng.random() < 0.5 else w - border - gw
    out = img.copy()
    out[top:top + gh, left:left + 1] = 250
    out[top + gh - 1, left:left + gw] = 250
    out[top, left:left + gw] = 250
    return out


def sample_lesions(severity, rng):
    if severity <= 0:
        return []
    lesions = [Lesion(float(rng.uniform(0.25, 0.75)), float(severity), float(rng.uniform(0, 2 * math.pi)))]
    if severity < 1.0 and rng.random() < 0.5:
        pos = lesions[0].position + (0.3 if lesions[0].position < 0.5 else -0.3)
        lesions.append(Lesion(float(pos), float(severity * rng.uniform(0.2, 0.6)), float(rng.uniform(0, 2 * math.pi))))
    return lesions


def generate_vessel_image(severity, width, size, view_angle, rng, lesions=None, noise=8.0):
    return render_vessel(severity, width, size, view_angle, rng, lesions, noise)[0]


def tube_widths(tube_mask):
    """Tube pixel count per image row."""
    return np.asarray(tube_mask).sum(axis=1)


def _quota_counts(n, probs):
    raw = np.asarray(probs) * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def sample_vessel_severities(cadrads, rng):
    """Per-vessel severities whose maximum falls in the band of ``cadrads``."""
    if cadrads == 0:
        return {v: 0.0 for v in VESSELS}
    k = int(rng.choice([1, 2, 3], p=[0.5, 0.3, 0.2]))
    diseased = [VESSELS[i] for i in sorted(rng.choice(3, size=k, replace=False))]
    lo, hi = _BANDS[cadrads]
    smax = float(rng.uniform(lo, hi)) if hi > lo else lo
    out = {v: 0.0 for v in VESSELS}
    worst = diseased[int(rng.integers(len(diseased)))]
    for v in diseased:
        out[v] = smax if v == worst else min(float(rng.uniform(0.05, max(smax, 0.06))), smax, 0.98)
    return out


def generate_dataset(config: SynthConfig, out_dir):
    """Write images, ``manifest.json`` and ``ground_truth.json`` under ``out_dir``.

    CAD-RADS scores are allotted by largest-remainder quotas of the
    configured distribution, then shuffled over patients.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    counts = _quota_counts(config.n_patients, config.cadrads_distribution)
    scores = np.repeat(np.arange(6), counts)
    scores = substream(config.seed, "synth", "scores").permutation(scores)

    patients, images, truth = [], [], {}
    size = (config.image_height, config.image_width)
    for idx, cad in enumerate(scores):
        pid = f"P{idx:04d}"
        rng = substream(config.seed, "synth", pid)
        sev = sample_vessel_severities(int(cad), rng)
        assert severity_to_cadrads(sev.values()) == cad
        patients.append({"id": pid, "cadrads": int(cad)})
        truth[pid] = {"cadrads": int(cad), "vessels": {}}
        for vessel in VESSELS:
            lesions = sample_lesions(sev[vessel], rng)
            truth[pid]["vessels"][vessel] = asdict(VesselTruth(sev[vessel], [asdict(l) for l in lesions]))
            if cad > 0 and sev[vessel] == 0:
                continue
            for view in range(config.views_per_vessel):
                img, _, _ = render_vessel(sev[vessel], config.vessel_width, size,
                                          math.radians(45 * view), rng, lesions, config.noise)
                if rng.random() < config.glyph_probability:
                    img = add_glyph(img, rng)
                rel = f"images/{pid}_{vessel}_v{view}.png"
                imaging.write_image(out_dir / rel, img)
                images.append({"id": f"{pid}_{vessel}_v{view}", "patient_id": pid, "vessel": vessel,
                               "view": view, "path": rel})

    manifest = {"patients": patients, "images": images}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out_dir / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    return manifest, truth
