"""The synth -> preprocess -> split -> train -> eval -> explain -> embed -> tsne sequence, in-process."""

import hashlib
import json
from pathlib import Path

from cadrads.cli import main

SMOKE_CONFIG = {
    "task": "binary", "model": {"preset": "nano"},
    "hyperparams": {"epochs": 5, "lr": 1e-3, "lr_after_decay": 1e-4, "lr_decay_epoch": 4, "dropout": 0.1,
                    "weight_decay": 0.01},
    "synth": {"n_patients": 24}, "evaluation": {"bootstrap": 200}, "explain": {"m_steps": 16},
}


def write_config(root: Path, seed: int = 3, **extra) -> Path:
    doc = {**SMOKE_CONFIG, "seed": seed, **extra,
           "paths": {"raw_dir": str(root / "raw"), "data_dir": str(root / "pre"), "run_dir": str(root / "run"),
                     "split": str(root / "pre" / "split.json")}}
    path = root / "config.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def run(*argv) -> int:
    return main([str(a) for a in argv])


def smoke(root, seed: int = 3) -> dict:
    """Run the whole sequence under ``root``; returns exit codes by step."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = write_config(root, seed)
    ck = root / "run" / "best.ckpt"
    codes = {
        "synth": run("synth", "--config", cfg),
        "preprocess": run("preprocess", "--manifest", root / "raw" / "manifest.json", "--out", root / "pre"),
        "split": run("split", "--manifest", root / "pre" / "manifest.json", "--seed", seed),
        "train": run("train", "--config", cfg),
        "eval": run("eval", "--checkpoint", ck, "--config", cfg),
    }
    patient = json.loads((root / "pre" / "split.json").read_text())["test"][0]
    codes["explain"] = run("explain", "--checkpoint", ck, "--config", cfg, "--patient", patient)
    codes["embed"] = run("embed", "--checkpoint", ck, "--config", cfg)
    codes["tsne"] = run("tsne", "--embeddings", root / "run" / "embeddings.csv", "--perplexity", 1.3, "--iters", 300)
    return codes


def artifact_hashes(root) -> dict:
    """sha256 of every artifact under the run directory except the timestamped log and echoed config."""
    run_dir = Path(root) / "run"
    out = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name not in ("run.log", "config.json"):
            out[p.relative_to(run_dir).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out
