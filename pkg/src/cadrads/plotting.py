"""Headless matplotlib figures (Figure objects, no pyplot state)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.cm import ScalarMappable
from matplotlib.colors import LinearSegmentedColormap, Normalize
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

# negative contributions blue, positive pink, zero white
ATTRIBUTION_CMAP = LinearSegmentedColormap.from_list("attribution", ["#1e88e5", "#ffffff", "#ff0d57"])
_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    return path


def roc_figure(curves: dict, path, title: str = "ROC") -> Path:
    """``curves``: name -> (fpr, tpr, auc)."""
    fig = Figure(figsize=(4.5, 4.5))
    ax = fig.add_subplot()
    for name, (fpr, tpr, auc) in curves.items():
        ax.plot(fpr, tpr, lw=1.5, label=f"{name} (AUC {auc:.3f})")
    ax.plot([0, 1], [0, 1], ls=":", color="0.6", lw=1)
    ax.set(xlabel="False positive rate", ylabel="True positive rate", title=title, xlim=(0, 1), ylim=(0, 1.01))
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def tsne_figure(coords, labels, path, title: str = "t-SNE of patient embeddings") -> Path:
    coords = np.asarray(coords)
    labels = np.asarray(labels)
    fig = Figure(figsize=(4.5, 4.5))
    ax = fig.add_subplot()
    for lab in np.unique(labels):
        m = labels == lab
        ax.scatter(coords[m, 0], coords[m, 1], s=18, label=f"class {lab}")
    ax.set(title=title, xticks=[], yticks=[])
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def patches_figure(image, patches, patch: int, path, title: str = "") -> Path:
    """Grayscale image with the ranked patches as dashed rectangles."""
    fig = Figure(figsize=(3, 3))
    ax = fig.add_subplot()
    ax.imshow(image, cmap="gray", vmin=0, vmax=1)
    for rank, p in enumerate(patches, 1):
        r, c = p.top_left
        ax.add_patch(Rectangle((c - 0.5, r - 0.5), patch, patch, fill=False, ls="--", lw=1.2, ec="#ffcc00"))
        ax.text(c + 1, r + 1, str(rank), color="#ffcc00", fontsize=7, va="top")
    ax.set(title=title, xticks=[], yticks=[])
    fig.tight_layout()
    return _save(fig, path)


def attribution_scale(values) -> float:
    """Symmetric colour limit: 99th percentile of |attribution| (1 when the map is all zero)."""
    s = float(np.percentile(np.abs(values), 99))
    return s if s > 0 else 1.0


def attribution_rgba(values, scale: float | None = None) -> np.ndarray:
    """Diverging colours with opacity proportional to |value| / scale; zero is fully transparent."""
    scale = attribution_scale(values) if scale is None else scale
    norm = np.clip(np.asarray(values) / scale, -1, 1)
    rgba = ATTRIBUTION_CMAP((norm + 1) / 2)
    rgba[..., 3] = np.abs(norm)
    return rgba


def attribution_figure(image, values, path, title: str = "") -> Path:
    scale = attribution_scale(values)
    fig = Figure(figsize=(3.6, 3))
    ax = fig.add_subplot()
    ax.imshow(image, cmap="gray", vmin=0, vmax=1, alpha=0.35)
    ax.imshow(attribution_rgba(values, scale))
    sm = ScalarMappable(Normalize(-scale, scale), ATTRIBUTION_CMAP)
    fig.colorbar(sm, ax=ax, fraction=0.046, pad=0.04)
    ax.set(title=title, xticks=[], yticks=[])
    fig.tight_layout()
    return _save(fig, path)
