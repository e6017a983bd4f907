"""Preprocessing of single-channel straightened-MPR images.

Images are 2-D ``uint8`` numpy arrays, masks are 2-D ``bool`` arrays.
Every function here is pure and deterministic.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import AllBackground, EmptyMaskWarning, InvalidParams, PreprocessFailure

MIN_SIDE = 8
CROP_MARGIN = 2


@dataclass(frozen=True)
class ClaheParams:
    clip_limit: float = 2.0
    tiles_x: int = 8
    tiles_y: int = 8

    def __post_init__(self):
        if not self.clip_limit >= 1.0:
            raise InvalidParams(f"clip_limit must be >= 1.0, got {self.clip_limit}")
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise InvalidParams("tiles_x and tiles_y must be >= 1")


def as_gray(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise InvalidParams(f"expected a 2-D grayscale image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise InvalidParams("pixel intensities must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


# --------------------------------------------------------------------------- #
# binarization and components
# --------------------------------------------------------------------------- #

def otsu_threshold(img) -> int | None:
    """Otsu threshold ``t`` such that foreground is ``img >= t``.

    Candidates are 1..255; ties go to the smallest ``t``.  Returns ``None``
    for a constant image.
    """
    img = as_gray(img)
    hist = np.bincount(img.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    if np.count_nonzero(hist) < 2:
        return None
    levels = np.arange(256, dtype=np.float64)
    # class "low" holds intensities < t, for t = 1..255
    w_low = np.cumsum(hist)[:-1]
    s_low = np.cumsum(hist * levels)[:-1]
    w_high = total - w_low
    s_high = s_low[-1] + hist[-1] * 255.0 - s_low
    with np.errstate(divide="ignore", invalid="ignore"):
        mu_low = s_low / w_low
        mu_high = s_high / w_high
        between = w_low * w_high * (mu_low - mu_high) ** 2
    between = np.where((w_low > 0) & (w_high > 0), between, -1.0)
    return int(np.argmax(between)) + 1


def binarize(img) -> np.ndarray:
    img = as_gray(img)
    t = otsu_threshold(img)
    if t is None:
        return np.zeros(img.shape, dtype=bool)
    return img >= t


def _structure(connectivity):
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise InvalidParams(f"connectivity must be 4 or 8, got {connectivity}")


def largest_component(mask, connectivity: int = 8) -> np.ndarray:
    """Keep only the largest connected component of ``mask``.

    Equal-size components are resolved in favour of the one whose first
    pixel comes earliest in row-major order.  An empty mask is returned
    unchanged with an :class:`EmptyMaskWarning`.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_structure(connectivity))
    if n == 0:
        warnings.warn("mask has no foreground pixels", EmptyMaskWarning, stacklevel=2)
        return np.zeros_like(mask)
    # labels are assigned in raster order of each component's first pixel,
    # so argmax (first maximum) implements the tie rule
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return labels == keep


def remove_artifacts(img) -> np.ndarray:
    img = as_gray(img)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyMaskWarning)
        keep = largest_component(binarize(img), 8)
    if not keep.any():
        raise PreprocessFailure("no foreground object found", stage="remove_artifacts")
    out = img.copy()
    out[~keep] = 0
    return out


# --------------------------------------------------------------------------- #
# CLAHE
# --------------------------------------------------------------------------- #

def _tile_edges(n, tiles):
    return [(i * n) // tiles for i in range(tiles + 1)]


def tile_lut(tile, clip_limit) -> np.ndarray:
    """Float mapping table (256 entries) for one tile.

    The clipped histogram excess is spread evenly over all bins; the CDF is
    rescaled so that intensity 0 maps to 0 and 255 maps to 255.
    """
    tile = np.asarray(tile, dtype=np.uint8)
    n = tile.size
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
    limit = clip_limit * n / 256.0
    excess = np.maximum(hist - limit, 0.0).sum()
    hist = np.minimum(hist, limit) + excess / 256.0
    cdf = np.cumsum(hist)
    span = n - cdf[0]
    if span <= 1e-9 * n:
        return np.arange(256, dtype=np.float64)
    return 255.0 * (cdf - cdf[0]) / span


def _interp_axis(centers, n):
    """Per-pixel (lower tile, upper tile, weight) along one axis."""
    pos = np.arange(n)
    centers = np.asarray(centers)
    lo = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, len(centers) - 1)
    hi = np.minimum(lo + 1, len(centers) - 1)
    gap = (centers[hi] - centers[lo]).astype(np.float64)
    w = np.where(gap > 0, (pos - centers[lo]) / np.where(gap > 0, gap, 1.0), 0.0)
    return lo, hi, np.clip(w, 0.0, 1.0)


def clahe(img, params: ClaheParams | None = None) -> np.ndarray:
    """Contrast limited adaptive histogram equalization.

    Tile mappings are anchored at each tile's central pixel
    (``start + (size - 1) // 2``) and blended bilinearly between anchors;
    pixels outside the outermost anchors use the nearest tile.
    """
    params = params or ClaheParams()
    img = as_gray(img)
    h, w = img.shape
    ty, tx = params.tiles_y, params.tiles_x
    if h // ty < 2 or w // tx < 2:
        raise InvalidParams(f"tiles {ty}x{tx} too small for a {h}x{w} image (need >= 2x2 pixels per tile)")
    ys, xs = _tile_edges(h, ty), _tile_edges(w, tx)

    luts = np.empty((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            luts[i, j] = tile_lut(img[ys[i]:ys[i + 1], xs[j]:xs[j + 1]], params.clip_limit)

    cy = [ys[i] + (ys[i + 1] - ys[i] - 1) // 2 for i in range(ty)]
    cx = [xs[j] + (xs[j + 1] - xs[j] - 1) // 2 for j in range(tx)]
    r0, r1, wr = _interp_axis(cy, h)
    c0, c1, wc = _interp_axis(cx, w)

    v = img.astype(np.intp)
    R0, C0 = r0[:, None], c0[None, :]
    R1, C1 = r1[:, None], c1[None, :]
    WR, WC = wr[:, None], wc[None, :]
    out = ((1 - WR) * (1 - WC) * luts[R0, C0, v]
           + (1 - WR) * WC * luts[R0, C1, v]
           + WR * (1 - WC) * luts[R1, C0, v]
           + WR * WC * luts[R1, C1, v])
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------- #
# geometry
# --------------------------------------------------------------------------- #

def autocrop(img, threshold: int = 0, margin: int = CROP_MARGIN):
    """Crop to the tight box of pixels ``> threshold`` plus ``margin``.

    Returns ``(cropped, bbox)`` with ``bbox = (top, left, bottom, right)``,
    bottom/right exclusive.
    """
    img = as_gray(img)
    rows = np.flatnonzero((img > threshold).any(axis=1))
    cols = np.flatnonzero((img > threshold).any(axis=0))
    if rows.size == 0:
        raise AllBackground(f"no pixel above threshold {threshold}", stage="autocrop")
    h, w = img.shape
    top = max(int(rows[0]) - margin, 0)
    left = max(int(cols[0]) - margin, 0)
    bottom = min(int(rows[-1]) + 1 + margin, h)
    right = min(int(cols[-1]) + 1 + margin, w)
    return img[top:bottom, left:right].copy(), (top, left, bottom, right)


def _axis_weights(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_float(arr, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres; float64 in, float64 out."""
    if out_h < 1 or out_w < 1:
        raise InvalidParams("output size must be >= 1")
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    r0, r1, wr = _axis_weights(h, out_h)
    c0, c1, wc = _axis_weights(w, out_w)
    top = arr[r0][:, c0] * (1 - wc) + arr[r0][:, c1] * wc
    bot = arr[r1][:, c0] * (1 - wc) + arr[r1][:, c1] * wc
    return top * (1 - wr)[:, None] + bot * wr[:, None]


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    img = as_gray(img)
    out = resize_float(img, out_h, out_w)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------- #
# pipeline
# --------------------------------------------------------------------------- #

def preprocess(img, params: ClaheParams | None = None, *, return_info: bool = False):
    """Artifact removal, then CLAHE, then background crop.

    With ``return_info`` the second element is a sidecar dict holding stage
    timings, the binarization threshold, the crop box and any warnings.
    """
    params = params or ClaheParams()
    img = as_gray(img)
    info = {"timings": {}, "threshold": otsu_threshold(img), "bbox": None, "warnings": []}

    stage = "remove_artifacts"
    try:
        t0 = time.perf_counter()
        out = remove_artifacts(img)
        info["timings"][stage] = time.perf_counter() - t0

        stage = "clahe"
        t0 = time.perf_counter()
        out = clahe(out, params)
        info["timings"][stage] = time.perf_counter() - t0

        stage = "autocrop"
        t0 = time.perf_counter()
        out, bbox = autocrop(out, 0)
        info["timings"][stage] = time.perf_counter() - t0
        info["bbox"] = list(bbox)
    except PreprocessFailure as exc:
        raise PreprocessFailure(str(exc), stage=stage) from exc
    except InvalidParams as exc:
        raise PreprocessFailure(str(exc), stage=stage) from exc

    if min(out.shape) < MIN_SIDE:
        raise PreprocessFailure(f"cropped image {out.shape} smaller than {MIN_SIDE}x{MIN_SIDE}", stage="autocrop")
    if bbox == (0, 0, img.shape[0], img.shape[1]):
        info["warnings"].append("no background border found")
    return (out, info) if return_info else out


# --------------------------------------------------------------------------- #
# file I/O
# --------------------------------------------------------------------------- #

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def write_image(path, img) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".ppm") else "PNG"
    Image.fromarray(as_gray(img)).save(path, format=fmt)


def preprocess_file(src, dst, params: ClaheParams | None = None) -> dict:
    """Preprocess one image file; writes the result and a ``.json`` sidecar."""
    params = params or ClaheParams()
    out, info = preprocess(read_image(src), params, return_info=True)
    write_image(dst, out)
    info["clahe"] = asdict(params)
    Path(dst).with_suffix(".json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return info
