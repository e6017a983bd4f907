"""Glue between the stages: preprocess a manifest, split it, assemble samples."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from . import imaging
from .dataset import (ImageStore, Manifest, SplitAssignment, assemble_samples, compute_imputation_templates,
                      save_templates)

log = logging.getLogger(__name__)


def preprocess_manifest(manifest: Manifest, out_dir, params: imaging.ClaheParams | None = None) -> Manifest:
    """Run the preprocessing chain over every image; writes a new manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    images = []
    for im in manifest.images:
        rel = Path("images") / (Path(im.path).stem + ".png")
        dst = out_dir / rel
        dst.parent.mkdir(parents=True, exist_ok=True)
        imaging.preprocess_file(manifest.resolve(im), dst, params)
        images.append(replace(im, path=rel.as_posix()))
    out = Manifest(manifest.patients, images, out_dir)
    out.save(out_dir / "manifest.json")
    return out


@dataclass
class PreparedData:
    manifest: Manifest
    split: SplitAssignment
    templates: dict
    train: list          # StackedSample of all training patients (every fold)
    test: list

    def patient_samples(self, ids) -> list:
        ids = set(ids)
        return [s for s in self.train + self.test if s.patient_id in ids]


def prepare(manifest: Manifest, split: SplitAssignment, size: int, template_dir=None) -> PreparedData:
    """Resize, compute healthy-train imputation templates, and stack samples.

    Templates come from the healthy training patients of the whole training
    set, so the same templates serve every cross-validation fold.
    """
    store = ImageStore(manifest, size)
    templates = compute_imputation_templates(manifest, split, store)
    if template_dir is not None:
        save_templates(templates, template_dir)
    train = assemble_samples(manifest, templates, split.train, store)
    test = assemble_samples(manifest, templates, split.test, store)
    log.info("assembled %d training and %d test samples", len(train), len(test))
    return PreparedData(manifest, split, templates, train, test)


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
