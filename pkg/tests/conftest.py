import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cadrads import imaging
from cadrads.dataset import Manifest, PatientRecord, VesselImage


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def make_manifest(root, layout, size=8, value_fn=None):
    """Write tiny images and return a Manifest.

    ``layout`` maps patient id -> (cadrads, {vessel: [views]}).
    """
    root = Path(root)
    patients, images = [], []
    for pid, (cad, vessels) in sorted(layout.items()):
        patients.append(PatientRecord(pid, cad))
        for vessel, views in vessels.items():
            for v in views:
                rel = f"img/{pid}_{vessel}_v{v}.png"
                val = value_fn(pid, vessel, v) if value_fn else 100
                imaging.write_image(root / rel, np.full((size, size), val, np.uint8))
                images.append(VesselImage(f"{pid}_{vessel}_v{v}", pid, vessel, v, rel))
    return Manifest(patients, images, root)


ALL = {v: list(range(8)) for v in ("LAD", "LCX", "RCA")}
