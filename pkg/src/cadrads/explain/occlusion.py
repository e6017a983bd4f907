"""Occlusion sensitivity: which patches of each vessel channel matter most."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import PatchTooLarge
from .common import scores

PATCH = 80
STRIDE = 16
REFERENCE_SIDE = 224
MAX_OVERLAP = 0.25


@dataclass
class Patch:
    channel: int
    top_left: tuple
    score_drop: float


@dataclass
class OcclusionResult:
    target_class: int
    p_top: float
    patch: int
    stride: int
    patches: list                           # per channel: ranked Patch list
    drops: np.ndarray = field(repr=False)   # channels x rows x cols drop map over all positions
    positions: list = field(repr=False, default_factory=list)


def scaled_patch(side: int, patch: int = PATCH, stride: int = STRIDE):
    """Patch and stride rescaled from the 224 reference to ``side``."""
    return max(1, round(patch * side / REFERENCE_SIDE)), max(1, round(stride * side / REFERENCE_SIDE))


def slide_positions(side: int, patch: int, stride: int) -> list:
    pos = list(range(0, side - patch + 1, stride))
    if pos[-1] != side - patch:
        pos.append(side - patch)
    return pos


def occlude(data: np.ndarray, channels, row: int, col: int, patch: int, value: float = 0.0) -> np.ndarray:
    out = np.array(data, copy=True)
    for c in np.atleast_1d(channels):
        out[c, row:row + patch, col:col + patch] = value
    return out


def _overlap(a, b, patch):
    dr = max(0, patch - abs(a[0] - b[0]))
    dc = max(0, patch - abs(a[1] - b[1]))
    return dr * dc


def select_patches(candidates, patch: int, top_k: int, max_overlap: float = MAX_OVERLAP) -> list:
    """Greedy top-k by drop; a candidate overlapping any kept patch by more than ``max_overlap`` of its area is skipped."""
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i].score_drop)   # stable for ties
    kept = []
    for i in order:
        cand = candidates[i]
        if all(_overlap(cand.top_left, k.top_left, patch) <= max_overlap * patch * patch for k in kept):
            kept.append(cand)
            if len(kept) == top_k:
                break
    return kept


def _probs(model, batch: np.ndarray, chunk: int = 32) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(batch), chunk):
            logits = scores(model, torch.as_tensor(batch[i:i + chunk]))
            out.append(torch.softmax(logits.double(), dim=1).numpy())
    return np.concatenate(out)


def _drops(model, data, occluded, top) -> np.ndarray:
    """``p_top(x) - p_top(occluded)``, one image per forward pass.

    Batched CPU kernels round a row differently depending on its position
    in the batch, so every image (including ``x``) goes through the same
    batch-of-one path; a masked region the model ignores then gives a drop
    of exactly zero.
    """
    base = _probs(model, data[None])[0, top]
    return np.array([base - _probs(model, o[None])[0, top] for o in occluded])


def occlusion_patches(model, data: np.ndarray, patch: int = PATCH, stride: int = STRIDE, top_k: int = 3,
                      mask_value: float = 0.0, target_class: int | None = None) -> OcclusionResult:
    """Slide a ``patch x patch`` mask over one channel at a time.

    ``score_drop = p_top(x) - p_top(occluded x)`` where ``top`` is the
    predicted class of the unoccluded input unless ``target_class`` is given.
    """
    data = np.asarray(data, dtype=np.float32)
    c, h, w = data.shape
    if patch < 1 or stride < 1 or patch > min(h, w):
        raise PatchTooLarge(f"patch {patch} / stride {stride} invalid for a {h}x{w} image", stage="explain")
    model.eval()
    base = _probs(model, data[None])[0]
    top = int(base.argmax()) if target_class is None else int(target_class)
    rows, cols = slide_positions(h, patch, stride), slide_positions(w, patch, stride)
    drops = np.zeros((c, len(rows), len(cols)))
    ranked = []
    for ch in range(c):
        batch = np.stack([occlude(data, ch, r, q, patch, mask_value) for r in rows for q in cols])
        drops[ch] = _drops(model, data, batch, top).reshape(len(rows), len(cols))
        cands = [Patch(ch, (r, q), float(drops[ch, i, j])) for i, r in enumerate(rows) for j, q in enumerate(cols)]
        ranked.append(select_patches(cands, patch, top_k))
    return OcclusionResult(top, float(base[top]), patch, stride, ranked, drops, [rows, cols])
