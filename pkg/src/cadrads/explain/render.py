from __future__ import annotations

from pathlib import Path

from .. import plotting
from ..dataset import VESSELS
from .attribution import AttributionMap
from .occlusion import OcclusionResult


def render_overlays(data, occlusion: OcclusionResult, attribution: AttributionMap, out_dir,
                    prefix: str = "sample", channel_names=VESSELS) -> list:
    """Per channel: a patches figure and an attribution overlay (two PNGs each)."""
    out_dir = Path(out_dir)
    files = []
    for ch, name in enumerate(channel_names[:len(data)]):
        files.append(plotting.patches_figure(data[ch], occlusion.patches[ch], occlusion.patch,
                                             out_dir / f"{prefix}_{name}_patches.png", f"{name}: top patches"))
        files.append(plotting.attribution_figure(data[ch], attribution.values[ch],
                                                 out_dir / f"{prefix}_{name}_attribution.png",
                                                 f"{name}: class {attribution.target_class}"))
    return files
