import csv
import json

import pytest

from cadrads import cli
from cadrads.errors import NonFiniteLoss

from smoke import artifact_hashes, run, smoke, write_config


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    return root, smoke(root)


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def test_smoke_sequence_exits_zero(smoke_run):
    root, codes = smoke_run
    assert codes == dict.fromkeys(codes, 0)
    run_dir = root / "run"
    for name in ["best.ckpt", "epochs.csv", "split.json", "eval/metrics.json", "eval/metrics.csv",
                 "eval/roc_image.csv", "eval/roc_patient.csv", "eval/roc.png", "eval/predictions_patient.csv",
                 "embeddings.csv", "tsne.csv", "tsne.png"]:
        assert (run_dir / name).is_file(), name
    with open(run_dir / "epochs.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5


def test_eval_report_contents(smoke_run):
    root, _ = smoke_run
    doc = json.loads((root / "run" / "eval" / "metrics.json").read_text())
    assert set(doc["reports"]) == {"image", "patient"}
    pat = doc["reports"]["patient"]
    assert pat["n"] == 5
    for m in pat["metrics"].values():
        assert m["ci95"][0] <= m["value"] <= m["ci95"][1]


def test_explain_outputs_per_view(smoke_run):
    root, _ = smoke_run
    out = root / "run" / "explain"
    bins = sorted(out.glob("*_attribution.bin"))
    assert bins
    for b in bins:
        prefix = b.name[:-len("_attribution.bin")]
        assert len(list(out.glob(f"{prefix}_*.png"))) == 6


def test_compare_same_checkpoint(smoke_run, capsys):
    root, _ = smoke_run
    ck = root / "run" / "best.ckpt"
    assert run("compare", "--checkpoint", ck, "--checkpoint", ck, "--config", root / "config.json",
               "--out", root / "cmp") == 0
    doc = json.loads((root / "cmp" / "delong.json").read_text())
    assert doc["auc_a"] == doc["auc_b"] and doc["p"] == 1.0


def test_unknown_config_key(tmp_path, capsys):
    cfg = write_config(tmp_path, learning_rate=0.1)
    assert run("train", "--config", cfg) == 1
    err = _error(capsys)
    assert err["code"] == 1 and "learning_rate" in err["message"]


def test_unknown_nested_key(tmp_path, capsys):
    cfg = write_config(tmp_path, hyperparams={"epochz": 3})
    assert run("train", "--config", cfg) == 1
    assert "epochz" in _error(capsys)["message"]


def test_head_mismatch(smoke_run, capsys):
    root, _ = smoke_run
    code = run("eval", "--checkpoint", root / "run" / "best.ckpt", "--config", root / "config.json",
               "--task", "multi", "--out", root / "bad")
    assert code == 1
    assert "head" in _error(capsys)["message"]


def test_missing_data_dir_is_data_error(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("train", "--config", cfg) == 2
    assert _error(capsys)["code"] == 2


def test_invalid_json_and_usage(tmp_path, capsys):
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    assert run("train", "--config", bad) == 1
    assert run("train") == 1
    assert _error(capsys)["stage"] == "usage"


def test_numerical_failure_exit_code(tmp_path, capsys, monkeypatch):
    def boom(args):
        raise NonFiniteLoss("loss is nan")
    monkeypatch.setattr(cli, "cmd_train", boom)
    cfg = write_config(tmp_path)
    assert run("train", "--config", cfg) == 3
    assert _error(capsys) == {"code": 3, "stage": "training", "message": "loss is nan"}


def test_env_overrides_paths(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    monkeypatch.setenv("CADRADS_RUN_DIR", str(tmp_path / "elsewhere"))
    loaded = cli.RunConfig.load(cfg)
    assert loaded.paths.run_dir == str(tmp_path / "elsewhere")
    assert loaded.paths.data_dir == str(tmp_path / "pre")


def test_help_documents_every_flag(capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        for action in p._actions:
            assert action.help, f"{name} {action.option_strings}"


def test_synth_and_split_are_deterministic(tmp_path):
    for d in ("a", "b"):
        root = tmp_path / d
        root.mkdir()
        cfg = write_config(root, synth={"n_patients": 24})
        assert run("synth", "--config", cfg) == 0
        assert run("split", "--manifest", root / "raw" / "manifest.json", "--seed", 3, "--out", root / "s.json") == 0
    for rel in ("raw/manifest.json", "raw/ground_truth.json", "s.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_artifact_hashes_cover_run(smoke_run):
    root, _ = smoke_run
    hashes = artifact_hashes(root)
    assert "best.ckpt" in hashes and "eval/metrics.json" in hashes
    assert not any(k.endswith("run.log") for k in hashes)
