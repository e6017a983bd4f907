"""Manifests, labels, patient-wise splits, healthy-vessel imputation and sample assembly."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imaging
from .errors import (ConfigError, DataError, InsufficientStratum, MissingFile,
                     NoHealthyTraining, OutOfRange, ShapeMismatch)
from .rng import substream

VESSELS = ("LAD", "LCX", "RCA")
N_VIEWS = 8
ROTATION_DEG = 10.0


# --------------------------------------------------------------------------- #
# manifest
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    cadrads: int


@dataclass(frozen=True)
class VesselImage:
    image_id: str
    patient_id: str
    vessel: str
    view: int
    path: str


@dataclass
class Manifest:
    patients: list
    images: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate patient ids in manifest", stage="manifest")
        known = set(ids)
        seen = set()
        for p in self.patients:
            if not 0 <= p.cadrads <= 5:
                raise OutOfRange(f"patient {p.patient_id}: CAD-RADS {p.cadrads} outside 0..5", stage="manifest")
        for im in self.images:
            if im.patient_id not in known:
                raise DataError(f"image {im.image_id} references unknown patient {im.patient_id}", stage="manifest")
            if im.vessel not in VESSELS:
                raise DataError(f"image {im.image_id}: unknown vessel {im.vessel!r}", stage="manifest")
            if not 0 <= im.view < N_VIEWS:
                raise DataError(f"image {im.image_id}: view {im.view} outside 0..7", stage="manifest")
            key = (im.patient_id, im.vessel, im.view)
            if key in seen:
                raise DataError(f"two images for patient/vessel/view {key}", stage="manifest")
            seen.add(key)

    @property
    def cadrads(self) -> dict:
        return {p.patient_id: p.cadrads for p in self.patients}

    def images_by_patient(self) -> dict:
        out = defaultdict(dict)
        for im in self.images:
            out[im.patient_id][(im.vessel, im.view)] = im
        return out

    def resolve(self, image: VesselImage) -> Path:
        return self.root / image.path

    def to_dict(self) -> dict:
        return {
            "patients": [{"id": p.patient_id, "cadrads": p.cadrads} for p in self.patients],
            "images": [{"id": i.image_id, "vessel": i.vessel, "view": i.view, "path": i.path, "patient_id": i.patient_id}
                       for i in self.images],
        }

    @classmethod
    def from_dict(cls, doc: dict, root=".") -> "Manifest":
        try:
            patients = [PatientRecord(str(p["id"]), int(p["cadrads"])) for p in doc["patients"]]
            images = []
            for i in doc["images"]:
                pid = i.get("patient_id")
                if pid is None:
                    # ids written by the generator look like <patient>_<vessel>_v<view>
                    pid = str(i["id"]).rsplit("_", 2)[0]
                images.append(VesselImage(str(i["id"]), str(pid), str(i["vessel"]), int(i["view"]), str(i["path"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest: {exc}", stage="manifest") from exc
        return cls(patients, images, Path(root))

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise MissingFile(f"manifest not found: {path}", stage="manifest")
        return cls.from_dict(json.loads(path.read_text()), root=path.parent)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def map_labels(cadrads: int, task: str) -> int:
    if not isinstance(cadrads, (int, np.integer)) or not 0 <= cadrads <= 5:
        raise OutOfRange(f"CAD-RADS score {cadrads!r} outside 0..5")
    if task == "binary":
        return int(cadrads >= 3)
    if task == "multi":
        return 0 if cadrads == 0 else 1 if cadrads <= 3 else 2
    raise ConfigError(f"unknown task {task!r}; expected 'binary' or 'multi'")


def num_classes(task: str) -> int:
    return {"binary": 2, "multi": 3}[task]


# --------------------------------------------------------------------------- #
# splitting
# --------------------------------------------------------------------------- #

@dataclass
class SplitAssignment:
    seed: int
    test: list
    folds: dict

    @property
    def train(self) -> list:
        return sorted(self.folds)

    def fold_members(self, k: int) -> list:
        return sorted(p for p, f in self.folds.items() if f == k)

    def n_folds(self) -> int:
        return max(self.folds.values()) + 1 if self.folds else 0

    def to_dict(self) -> dict:
        return {"seed": self.seed, "test": sorted(self.test), "folds": dict(sorted(self.folds.items()))}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SplitAssignment":
        path = Path(path)
        if not path.exists():
            raise MissingFile(f"split file not found: {path}", stage="split")
        doc = json.loads(path.read_text())
        return cls(int(doc["seed"]), list(doc["test"]), {k: int(v) for k, v in doc["folds"].items()})


def _largest_remainder(quotas, total):
    base = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def stratified_patient_split(manifest: Manifest, test_fraction=0.2, folds=10, seed=0) -> SplitAssignment:
    """Patient-wise train/test split stratified by CAD-RADS, plus CV folds on train.

    The test size is ``round(test_fraction * n_patients)`` distributed over
    strata by largest remainder, so each stratum is within one patient of
    its exact share.  Training patients are dealt round-robin into folds,
    continuing the deal across strata to keep fold sizes balanced.
    """
    by_score = defaultdict(list)
    for p in manifest.patients:
        by_score[p.cadrads].append(p.patient_id)
    strata = sorted(by_score)
    for s in strata:
        if len(by_score[s]) < 2:
            raise InsufficientStratum(f"CAD-RADS {s} has {len(by_score[s])} patient(s); at least 2 are needed")

    n_total = sum(len(v) for v in by_score.values())
    n_test_total = int(math.floor(test_fraction * n_total + 0.5))
    n_test = _largest_remainder([test_fraction * len(by_score[s]) for s in strata], n_test_total)

    test, fold_of, offset = [], {}, 0
    for s, k in zip(strata, n_test):
        ids = sorted(by_score[s])
        ids = [ids[i] for i in substream(seed, "split", s).permutation(len(ids))]
        test.extend(ids[:k])
        for j, pid in enumerate(ids[k:]):
            fold_of[pid] = (offset + j) % folds
        offset += len(ids) - k
    return SplitAssignment(int(seed), sorted(test), dict(sorted(fold_of.items())))


# --------------------------------------------------------------------------- #
# images, templates, samples
# --------------------------------------------------------------------------- #

class ImageStore:
    """Loads preprocessed images resized to ``size`` x ``size`` (float64, 0..255), cached."""

    def __init__(self, manifest: Manifest, size: int = 224):
        self.manifest = manifest
        self.size = size
        self._cache = {}

    def get(self, image: VesselImage) -> np.ndarray:
        arr = self._cache.get(image.image_id)
        if arr is None:
            path = self.manifest.resolve(image)
            if not path.exists():
                raise MissingFile(f"image file not found: {path}", stage="assemble")
            arr = imaging.resize_float(imaging.read_image(path), self.size, self.size)
            self._cache[image.image_id] = arr
        return arr


def compute_imputation_templates(manifest: Manifest, split: SplitAssignment, store: ImageStore) -> dict:
    """Pixel-wise mean image per (vessel, view) over healthy training patients."""
    train = set(split.train)
    healthy = sorted(p.patient_id for p in manifest.patients if p.cadrads == 0 and p.patient_id in train)
    if not healthy:
        raise NoHealthyTraining("the training split contains no CAD-RADS 0 patient")
    healthy = set(healthy)
    sums, counts = {}, defaultdict(int)
    for im in sorted(manifest.images, key=lambda i: (i.vessel, i.view, i.patient_id)):
        if im.patient_id not in healthy:
            continue
        key = (im.vessel, im.view)
        arr = store.get(im)
        sums[key] = arr.copy() if key not in sums else sums[key] + arr
        counts[key] += 1
    return {key: sums[key] / counts[key] for key in sorted(sums)}


def save_templates(templates: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for (vessel, view), arr in sorted(templates.items()):
        name = f"template_{vessel}_v{view}.png"
        imaging.write_image(out_dir / name, np.clip(np.floor(arr + 0.5), 0, 255).astype(np.uint8))
        index[f"{vessel}_v{view}"] = name
    (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


@dataclass
class StackedSample:
    patient_id: str
    view: int
    data: np.ndarray             # float32, 3 x S x S, channels LAD, LCX, RCA, values in [0, 1]
    label_binary: int
    label_multi: int
    cadrads: int
    imputed_channels: tuple = ()

    def label(self, task: str) -> int:
        return self.label_binary if task == "binary" else self.label_multi


def plan_samples(manifest: Manifest, patient_ids) -> list:
    """``(patient_id, view, imputed vessels)`` for every sample, without loading pixels."""
    by_patient = manifest.images_by_patient()
    plan = []
    for pid in sorted(patient_ids):
        have = by_patient.get(pid, {})
        for view in sorted({v for (_, v) in have}):
            missing = tuple(ves for ves in VESSELS if (ves, view) not in have)
            plan.append((pid, view, missing))
    return plan


def assemble_samples(manifest: Manifest, templates: dict, patient_ids, store: ImageStore) -> list:
    """Three-channel samples, one per (patient, view) with at least one real vessel image."""
    cad = manifest.cadrads
    by_patient = manifest.images_by_patient()
    out = []
    for pid, view, missing in plan_samples(manifest, patient_ids):
        chans = []
        for vessel in VESSELS:
            if vessel in missing:
                if (vessel, view) not in templates:
                    raise DataError(f"no imputation template for {vessel} view {view}", stage="assemble")
                arr = templates[(vessel, view)]
            else:
                arr = store.get(by_patient[pid][(vessel, view)])
            if arr.shape != (store.size, store.size):
                raise ShapeMismatch(f"{pid} {vessel} view {view}: shape {arr.shape} != {store.size}", stage="assemble")
            chans.append(arr)
        data = (np.stack(chans) / 255.0).astype(np.float32)
        c = cad[pid]
        out.append(StackedSample(pid, view, data, map_labels(c, "binary"), map_labels(c, "multi"), c, missing))
    return out


# --------------------------------------------------------------------------- #
# augmentation
# --------------------------------------------------------------------------- #

def apply_transform(data: np.ndarray, hflip: bool, vflip: bool, angle: float) -> np.ndarray:
    """Flip then rotate all channels identically (bilinear, zero fill)."""
    out = data
    if hflip:
        out = out[:, :, ::-1]
    if vflip:
        out = out[:, ::-1, :]
    out = np.ascontiguousarray(out)
    if angle != 0.0:
        out = np.stack([_rotate(ch, angle) for ch in out])
    return out.astype(data.dtype, copy=False)


def _rotate(channel, angle):
    theta = math.radians(angle)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    center = (np.array(channel.shape, dtype=np.float64) - 1) / 2.0
    out = ndimage.affine_transform(channel.astype(np.float64), rot, offset=center - rot @ center,
                                   order=1, mode="grid-constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def augment(sample: StackedSample, rng) -> StackedSample:
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    angle = float(rng.uniform(-ROTATION_DEG, ROTATION_DEG))
    return replace(sample, data=apply_transform(sample.data, hflip, vflip, angle))
