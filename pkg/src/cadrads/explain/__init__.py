"""Occlusion patches, expected-gradient attributions, t-SNE and overlay rendering."""

from .attribution import (AttributionMap, expected_gradients, load_attribution, save_attribution,
                          select_background)
from .occlusion import OcclusionResult, Patch, occlude, occlusion_patches, scaled_patch, select_patches
from .render import render_overlays
from .tsne import Embedding2D, PatientEmbeddings, export_embeddings, tsne

__all__ = [
    "AttributionMap", "Embedding2D", "OcclusionResult", "Patch", "PatientEmbeddings", "expected_gradients",
    "export_embeddings", "load_attribution", "occlude", "occlusion_patches", "render_overlays",
    "save_attribution", "scaled_patch", "select_background", "select_patches", "tsne",
]
