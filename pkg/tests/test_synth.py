import json
import math

import numpy as np
import pytest

from cadrads import synth
from cadrads.dataset import Manifest
from cadrads.errors import ConfigError


@pytest.mark.parametrize("sev,expected", [
    ((0, 0, 0), 0), ((0.1, 0, 0), 1), ((0.25, 0.1, 0), 2), ((0.6, 0, 0.2), 3),
    ((0.0, 0.7, 0), 4), ((0.99, 0, 0), 4), ((0.3, 1.0, 0), 5),
])
def test_severity_to_cadrads(sev, expected):
    assert synth.severity_to_cadrads(sev) == expected


def _render(sev, seed=0, angle=0.0):
    return synth.render_vessel(sev, 14, (128, 64), angle, np.random.default_rng(seed))


def test_healthy_width_is_nominal():
    _, tube, _ = _render(0.0)
    widths = synth.tube_widths(tube)
    inner = widths[widths > 0]
    assert abs(inner.min() - 14) <= 1 and abs(inner.max() - 14) <= 1


def test_occlusion_leaves_a_gap():
    _, tube, _ = _render(1.0)
    widths = synth.tube_widths(tube)
    border = 3
    assert (widths[border:-border] == 0).any()


def test_render_deterministic():
    a = synth.generate_vessel_image(0.4, 14, (128, 64), 0.3, np.random.default_rng(5))
    b = synth.generate_vessel_image(0.4, 14, (128, 64), 0.3, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("angle", [0, 45, 90, 135, 180, 225, 270, 315])
def test_severe_lesion_much_narrower(angle):
    _, healthy, _ = _render(0.0, angle=math.radians(angle))
    _, sick, _ = _render(0.9, angle=math.radians(angle))
    inner = slice(4, -4)
    assert synth.tube_widths(healthy)[inner].min() >= 5 * synth.tube_widths(sick)[inner].min()


def test_all_healthy_dataset(tmp_path):
    cfg = synth.SynthConfig(n_patients=10, cadrads_distribution=(1, 0, 0, 0, 0, 0),
                            image_height=48, image_width=32, vessel_width=8, seed=3)
    manifest, truth = synth.generate_dataset(cfg, tmp_path)
    assert len(manifest["images"]) == 240
    Manifest.load(tmp_path / "manifest.json")


def test_diseased_patients_only_have_diseased_vessels(tmp_path):
    cfg = synth.SynthConfig(n_patients=30, image_height=48, image_width=32, vessel_width=8, seed=1)
    manifest, truth = synth.generate_dataset(cfg, tmp_path)
    per_patient = {}
    for im in manifest["images"]:
        per_patient.setdefault(im["patient_id"], set()).add(im["vessel"])
    for pid, t in truth.items():
        sev = {v: d["severity"] for v, d in t["vessels"].items()}
        assert synth.severity_to_cadrads(sev.values()) == t["cadrads"]
        if t["cadrads"] > 0:
            assert per_patient[pid] == {v for v, s in sev.items() if s > 0}
            n = sum(1 for im in manifest["images"] if im["patient_id"] == pid)
            assert n == 8 * len(per_patient[pid])
        else:
            assert per_patient[pid] == {"LAD", "LCX", "RCA"}


def test_generation_is_byte_stable(tmp_path):
    cfg = synth.SynthConfig(n_patients=6, image_height=48, image_width=32, vessel_width=8, seed=9)
    synth.generate_dataset(cfg, tmp_path / "a")
    synth.generate_dataset(cfg, tmp_path / "b")
    for name in ("manifest.json", "ground_truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    doc = json.loads((tmp_path / "a" / "manifest.json").read_text())
    for im in doc["images"]:
        assert (tmp_path / "a" / im["path"]).read_bytes() == (tmp_path / "b" / im["path"]).read_bytes()


def test_config_validation():
    with pytest.raises(ConfigError):
        synth.SynthConfig(cadrads_distribution=(0.5, 0.5, 0.5, 0, 0, 0))
    with pytest.raises(ConfigError):
        synth.SynthConfig(vessel_width=40, image_width=64)
