"""Command-line front end.

Every subcommand reads the same JSON run config (see ``RunConfig``) or
takes explicit paths. Errors go to stderr as a single JSON line
``{"code", "stage", "message"}``; exit codes are 0 ok, 1 usage/config,
2 data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import CadradsError, ConfigError, DataError, MissingFile, NumericalError

log = logging.getLogger("cadrads")

ENV_PATHS = {"data_dir": "CADRADS_DATA_DIR", "run_dir": "CADRADS_RUN_DIR", "raw_dir": "CADRADS_RAW_DIR",
             "split": "CADRADS_SPLIT"}
TASKS = ("binary", "multi")
MODEL_PRESETS = ("tiny", "nano", "custom")


# --------------------------------------------------------------------------- #
# run config
# --------------------------------------------------------------------------- #

def _strict(doc, allowed, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return doc


@dataclass
class Paths:
    data_dir: str | None = None     # preprocessed store holding manifest.json
    run_dir: str | None = None      # checkpoints, logs, reports
    raw_dir: str | None = None      # synth output / preprocess input
    split: str | None = None        # split JSON; derived from the seed when absent


@dataclass
class RunConfig:
    """Schema (JSON; unknown keys anywhere are fatal)::

        {"paths": {"data_dir", "run_dir", "raw_dir", "split"},
         "task": "binary" | "multi",
         "model": {"preset": "tiny" | "nano" | "custom", "overrides": {...ModelConfig fields}},
         "hyperparams": {...HyperParams fields, defaults are the task's reported best cell},
         "seed": int, "val_fold": int | null, "image_size": int | null,
         "synth": {...SynthConfig fields except seed},
         "grid": {"space": {...GridSpace fields}, "folds": [int] | null},
         "evaluation": {"bootstrap": int, "alpha": float},
         "explain": {"m_steps": int, "background": int, "top_k": int}}
    """

    paths: Paths = field(default_factory=Paths)
    task: str = "binary"
    model: dict = field(default_factory=lambda: {"preset": "nano", "overrides": {}})
    hyperparams: dict = field(default_factory=dict)
    seed: int = 0
    val_fold: int | None = 0
    image_size: int | None = None
    synth: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=lambda: {"bootstrap": 2000, "alpha": 0.05})
    explain: dict = field(default_factory=lambda: {"m_steps": 64, "background": 16, "top_k": 3})

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        _strict(doc, [f.name for f in fields(cls)], "config")
        cfg = cls()
        paths = _strict(doc.get("paths", {}), [f.name for f in fields(Paths)], "paths")
        cfg.paths = Paths(**{k: (str(v) if v is not None else None) for k, v in paths.items()})
        cfg.task = doc.get("task", cfg.task)
        if cfg.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {cfg.task!r}")
        model = _strict(doc.get("model", {}), ["preset", "overrides"], "model")
        cfg.model = {"preset": model.get("preset", "nano"), "overrides": dict(model.get("overrides", {}))}
        if cfg.model["preset"] not in MODEL_PRESETS:
            raise ConfigError(f"model.preset must be one of {MODEL_PRESETS}")
        cfg.hyperparams = dict(doc.get("hyperparams", {}))
        cfg.seed = doc.get("seed", 0)
        cfg.val_fold = doc.get("val_fold", 0)
        cfg.image_size = doc.get("image_size")
        if not isinstance(cfg.seed, int) or cfg.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        cfg.synth = dict(_strict(doc.get("synth", {}), _synth_keys(), "synth"))
        cfg.grid = dict(_strict(doc.get("grid", {}), ["space", "folds"], "grid"))
        cfg.evaluation = {**cfg.evaluation, **_strict(doc.get("evaluation", {}), ["bootstrap", "alpha"], "evaluation")}
        cfg.explain = {**cfg.explain, **_strict(doc.get("explain", {}), ["m_steps", "background", "top_k"], "explain")}
        # build the typed pieces once so bad values fail at load time
        cfg.model_config()
        cfg.hp()
        cfg.grid_space()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        cfg = cls.from_dict(doc)
        for name, var in ENV_PATHS.items():
            if os.environ.get(var):
                setattr(cfg.paths, name, os.environ[var])
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self):
        from .evaluation import BaselineConfig
        from .model import ModelConfig, preset

        over = self.model["overrides"]
        if self.model["preset"] == "custom":
            if over.get("arch") == "baseline_cnn":
                return BaselineConfig.from_dict(over).validate()
            return ModelConfig.from_dict(over).validate()
        ModelConfig.from_dict(over)     # key check
        return preset(self.model["preset"], **over)

    def hp(self):
        from .training import TABLE1, HyperParams
        return HyperParams.from_dict({**TABLE1[self.task].to_dict(), **self.hyperparams})

    def grid_space(self):
        from .training import GridSpace
        return GridSpace.from_dict(self.grid.get("space", {}))

    def path(self, name: str, must_exist: bool = True) -> Path:
        value = getattr(self.paths, name)
        if value is None:
            raise ConfigError(f"paths.{name} is required for this command")
        p = Path(value)
        if must_exist and not p.exists():
            raise MissingFile(f"paths.{name} does not exist: {p}", stage="config")
        return p


def _synth_keys():
    from .synth import SynthConfig
    return [f.name for f in fields(SynthConfig) if f.name != "seed"]


# --------------------------------------------------------------------------- #
# shared helpers
# --------------------------------------------------------------------------- #

def _write_json(path, doc):
    from .evaluation.reports import write_json
    write_json(path, doc)


def _resolve_split(cfg: RunConfig, manifest):
    from .dataset import SplitAssignment, stratified_patient_split
    if cfg.paths.split:
        return SplitAssignment.load(cfg.path("split"))
    return stratified_patient_split(manifest, 0.2, 10, cfg.seed)


def _load_data(cfg: RunConfig, size: int):
    from .dataset import Manifest
    from .pipeline import prepare

    data_dir = cfg.path("data_dir")
    manifest = Manifest.load(data_dir / "manifest.json")
    split = _resolve_split(cfg, manifest)
    return prepare(manifest, split, size)


def _load_checkpoint(path, task: str):
    from .dataset import num_classes
    from .model import load_network

    if not Path(path).exists():
        raise MissingFile(f"checkpoint not found: {path}", stage="checkpoint")
    model, header = load_network(path)
    k = header["config"]["num_classes"]
    if k != num_classes(task):
        raise ConfigError(f"checkpoint head has {k} outputs but task {task!r} needs {num_classes(task)}",
                          stage="checkpoint")
    return model, header


def _samples_for(data, which: str):
    if which == "test":
        return data.test
    if which == "train":
        return data.train
    raise ConfigError(f"unknown split {which!r}")


def _attach_log(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("cadrads").addHandler(handler)
    logging.getLogger("cadrads").setLevel(logging.INFO)
    return handler


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #

def cmd_synth(args):
    from .synth import SynthConfig, generate_dataset
    cfg = RunConfig.load(args.config)
    out = Path(args.out) if args.out else cfg.path("raw_dir", must_exist=False)
    synth = SynthConfig(seed=cfg.seed, **cfg.synth)
    manifest, _ = generate_dataset(synth, out)
    print(json.dumps({"out": str(out), "patients": len(manifest["patients"]), "images": len(manifest["images"])}))


def cmd_preprocess(args):
    from .dataset import Manifest
    from .imaging import ClaheParams
    from .pipeline import preprocess_manifest
    params = ClaheParams(args.clip_limit, args.tiles, args.tiles)
    out = preprocess_manifest(Manifest.load(args.manifest), args.out, params)
    print(json.dumps({"out": str(args.out), "images": len(out.images)}))


def cmd_split(args):
    from .dataset import Manifest, stratified_patient_split
    manifest = Manifest.load(args.manifest)
    split = stratified_patient_split(manifest, args.test_fraction, args.folds, args.seed)
    out = Path(args.out) if args.out else Path(args.manifest).parent / "split.json"
    split.save(out)
    print(json.dumps({"out": str(out), "test": len(split.test), "train": len(split.train)}))


def cmd_train(args):
    from .training import fit, fold_samples, grid_search

    cfg = RunConfig.load(args.config)
    run_dir = cfg.path("run_dir", must_exist=False)
    handler = _attach_log(run_dir)
    try:
        mcfg = cfg.model_config()
        data = _load_data(cfg, cfg.image_size or mcfg.input_size)
        data.split.save(run_dir / "split.json")
        _write_json(run_dir / "config.json", cfg.to_dict())
        hp = cfg.hp()
        meta = {"task": cfg.task}
        if args.grid:
            hp, rows = grid_search(mcfg, cfg.grid_space(), data.train, data.split, cfg.seed, cfg.task,
                                   cfg.grid.get("folds"), base=hp, table_path=run_dir / "grid.csv")
            _write_json(run_dir / "grid_best.json", hp.to_dict())
        if cfg.val_fold is None:
            train, val = data.train, []
        else:
            train, val = fold_samples(data.train, data.split, cfg.val_fold)
        res = fit(mcfg, hp, train, val, cfg.seed, cfg.task, run_dir=run_dir, meta=meta)
        summary = {"checkpoint": str(res.checkpoint), "best_epoch": res.best_epoch,
                   "best_val_acc": res.best_val_acc, "n_train": len(train), "n_val": len(val)}
        print(json.dumps(summary))
    finally:
        logging.getLogger("cadrads").removeHandler(handler)
        handler.close()


def _default_out(args, sub):
    return Path(args.out) if args.out else Path(args.checkpoint[0] if isinstance(args.checkpoint, list)
                                                else args.checkpoint).parent / sub


def _positive_scores(preds, positive):
    return preds.probs[:, positive], (preds.labels == positive).astype(int)


def cmd_eval(args):
    from . import plotting
    from .evaluation import aggregate_per_patient, multiclass_report, predict, roc_curve
    from .evaluation.reports import report_doc, write_predictions_csv, write_report_csv, write_roc_csv

    cfg = RunConfig.load(args.config)
    task = args.task or cfg.task
    model, header = _load_checkpoint(args.checkpoint, task)
    data = _load_data(cfg, header["config"]["input_size"])
    samples = _samples_for(data, args.split)
    out = _default_out(args, "eval")
    out.mkdir(parents=True, exist_ok=True)

    image = predict(model, samples, task)
    patient = aggregate_per_patient(image)
    n_boot, alpha = cfg.evaluation["bootstrap"], cfg.evaluation["alpha"]
    reports = [multiclass_report(p, level, n_boot, cfg.seed, alpha) for level, p in (("image", image), ("patient", patient))]
    _write_json(out / "metrics.json", report_doc(reports, {"task": task, "split": args.split}))
    write_report_csv(out / "metrics.csv", reports)
    write_predictions_csv(out / "predictions_image.csv", image)
    write_predictions_csv(out / "predictions_patient.csv", patient)

    curves = {}
    classes = [1] if task == "binary" else range(image.k)
    for rep, p in zip(reports, (image, patient)):
        level = rep.level
        for c in classes:
            s, y = _positive_scores(p, c)
            fpr, tpr, thr = roc_curve(s, y)
            name = level if task == "binary" else f"{level}_class{c}"
            write_roc_csv(out / f"roc_{name}.csv", fpr, tpr, thr)
            curves[name] = (fpr, tpr, rep.values[f"class{c}.auc"])
    plotting.roc_figure(curves, out / "roc.png", f"ROC ({task}, {args.split})")
    print(json.dumps({"out": str(out), **{f"{r.level}_auc": r.auc for r in reports}}))


def cmd_compare(args):
    from . import plotting
    from .evaluation import aggregate_per_patient, delong_test, predict, roc_auc, roc_curve

    cfg = RunConfig.load(args.config)
    if len(args.checkpoint) != 2:
        raise ConfigError("compare needs exactly two --checkpoint arguments")
    positive = args.positive_class if args.positive_class is not None else (1 if cfg.task == "binary" else 2)
    scores, labels = [], None
    curves = {}
    for i, ck in enumerate(args.checkpoint):
        model, header = _load_checkpoint(ck, cfg.task)
        data = _load_data(cfg, header["config"]["input_size"])
        preds = predict(model, _samples_for(data, args.split), cfg.task)
        if args.level == "patient":
            preds = aggregate_per_patient(preds)
        s, y = _positive_scores(preds, positive)
        scores.append(s)
        labels = y
        fpr, tpr, _ = roc_curve(s, y)
        curves[f"model {'AB'[i]}"] = (fpr, tpr, roc_auc(s, y))
    result = delong_test(scores[0], scores[1], labels)
    out = _default_out(args, "compare")
    doc = {"level": args.level, "split": args.split, "positive_class": positive, "n": int(len(labels)), **result}
    _write_json(out / "delong.json", doc)
    plotting.roc_figure(curves, out / "roc_compare.png", f"ROC comparison ({args.level})")
    print(json.dumps(doc))


def cmd_explain(args):
    from .explain import (expected_gradients, occlusion_patches, render_overlays, save_attribution, scaled_patch,
                          select_background)
    from .rng import substream

    cfg = RunConfig.load(args.config)
    model, header = _load_checkpoint(args.checkpoint, cfg.task)
    data = _load_data(cfg, header["config"]["input_size"])
    samples = sorted(data.patient_samples([args.patient]), key=lambda s: s.view)
    if not samples:
        raise DataError(f"patient {args.patient!r} has no samples", stage="explain")
    out = _default_out(args, "explain")
    side = samples[0].data.shape[-1]
    patch, stride = scaled_patch(side)
    background = select_background(data.train, cfg.explain["background"], cfg.seed)
    summary = []
    for s in samples:
        prefix = f"{s.patient_id}_v{s.view}"
        occ = occlusion_patches(model, s.data, patch, stride, cfg.explain["top_k"])
        rng = substream(cfg.seed, "explain", s.patient_id, s.view)
        amap = expected_gradients(model, s.data, background, occ.target_class, cfg.explain["m_steps"], rng)
        amap.meta = {"patient_id": s.patient_id, "view": s.view}
        save_attribution(out / f"{prefix}_attribution.bin", amap)
        render_overlays(s.data, occ, amap, out, prefix)
        summary.append({"view": s.view, "target_class": occ.target_class, "p_top": occ.p_top,
                        "convergence_gap": amap.convergence_gap, "relative_gap": amap.relative_gap,
                        "patches": [[asdict(p) for p in ranked] for ranked in occ.patches],
                        "imputed_channels": list(s.imputed_channels)})
    _write_json(out / f"{args.patient}_explain.json", {"patient_id": args.patient, "patch": patch,
                                                        "stride": stride, "views": summary})
    print(json.dumps({"out": str(out), "views": len(samples)}))


def cmd_embed(args):
    from .explain import export_embeddings

    cfg = RunConfig.load(args.config)
    model, header = _load_checkpoint(args.checkpoint, cfg.task)
    data = _load_data(cfg, header["config"]["input_size"])
    emb = export_embeddings(model, _samples_for(data, args.split), cfg.task)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "embeddings.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "label", "cadrads"] + [f"e{i}" for i in range(emb.vectors.shape[1])])
        for pid, lab, cad, vec in zip(emb.patient_ids, emb.labels, emb.cadrads, emb.vectors):
            w.writerow([pid, lab, cad] + [repr(float(v)) for v in vec])
    print(json.dumps({"out": str(out), "patients": len(emb.patient_ids), "dim": int(emb.vectors.shape[1])}))


def read_embeddings_csv(path):
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"embeddings file not found: {path}", stage="tsne")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or rows[0][:3] != ["patient_id", "label", "cadrads"]:
        raise DataError(f"{path} is not an embeddings CSV", stage="tsne")
    body = rows[1:]
    ids = [r[0] for r in body]
    labels = [int(r[1]) for r in body]
    vectors = np.array([[float(v) for v in r[3:]] for r in body])
    return ids, labels, vectors


def cmd_tsne(args):
    from . import plotting
    from .explain import tsne

    ids, labels, vectors = read_embeddings_csv(args.embeddings)
    res = tsne(vectors, args.perplexity, args.iters, args.seed, ids)
    out = Path(args.out) if args.out else Path(args.embeddings).with_name("tsne.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "label", "x", "y"])
        for pid, lab, (x, y) in zip(ids, labels, res.coords):
            w.writerow([pid, lab, repr(float(x)), repr(float(y))])
    plotting.tsne_figure(res.coords, labels, out.with_suffix(".png"))
    print(json.dumps({"out": str(out), "kl": res.kl, "kl_initial": res.kl_initial, **res.config}))


# --------------------------------------------------------------------------- #
# argument parsing
# --------------------------------------------------------------------------- #

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}", stage="usage")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cadrads", description=__doc__.split("\n\n")[0],
                epilog="Path fields of the config may be overridden with "
                       + ", ".join(f"{v} (paths.{k})" for k, v in ENV_PATHS.items()) + ".")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic straightened-MPR dataset")
    s.add_argument("--config", required=True, help="run config JSON (uses seed and the synth section)")
    s.add_argument("--out", help="output directory (default: paths.raw_dir)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="artifact removal, CLAHE and autocrop over a manifest")
    s.add_argument("--manifest", required=True, help="input manifest.json")
    s.add_argument("--out", required=True, help="output directory for images, sidecars and the new manifest")
    s.add_argument("--clip-limit", type=float, default=2.0, help="CLAHE clip limit (default 2.0)")
    s.add_argument("--tiles", type=int, default=8, help="CLAHE tiles per axis (default 8)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("split", help="stratified patient-wise train/test split with CV folds")
    s.add_argument("--manifest", required=True, help="manifest.json to split")
    s.add_argument("--seed", type=int, default=0, help="split seed (default 0)")
    s.add_argument("--test-fraction", type=float, default=0.2, help="test share of patients (default 0.2)")
    s.add_argument("--folds", type=int, default=10, help="cross-validation folds (default 10)")
    s.add_argument("--out", help="split JSON path (default: split.json next to the manifest)")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="fit one model, or run the grid search first with --grid")
    s.add_argument("--config", required=True, help="run config JSON")
    s.add_argument("--grid", action="store_true", help="cross-validate the grid and train the best cell")
    s.set_defaults(func=cmd_train)

    def _ck(s, multiple=False):
        s.add_argument("--checkpoint", required=True, action="append" if multiple else "store",
                       help="checkpoint file" + (" (give twice)" if multiple else ""))
        s.add_argument("--config", required=True, help="run config JSON (data paths, task, seed)")
        s.add_argument("--split", default="test", choices=["test", "train"], help="which patients (default test)")
        s.add_argument("--out", help="output directory or file (default: next to the checkpoint)")

    s = sub.add_parser("eval", help="metrics with bootstrap CIs, ROC curves and predictions")
    _ck(s)
    s.add_argument("--task", choices=TASKS, help="override the config task")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="DeLong test between two checkpoints")
    _ck(s, multiple=True)
    s.add_argument("--level", choices=["image", "patient"], default="patient", help="comparison level")
    s.add_argument("--positive-class", type=int, help="one-vs-rest class (default 1 binary, 2 multi)")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("explain", help="occlusion patches and expected-gradient overlays for one patient")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--config", required=True, help="run config JSON")
    s.add_argument("--patient", required=True, help="patient id")
    s.add_argument("--out", help="output directory (default: next to the checkpoint)")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("embed", help="export per-patient embeddings to CSV")
    _ck(s)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("tsne", help="exact t-SNE of an embeddings CSV")
    s.add_argument("--embeddings", required=True, help="CSV written by 'embed'")
    s.add_argument("--perplexity", type=float, default=30.0, help="target perplexity (default 30)")
    s.add_argument("--iters", type=int, default=1000, help="gradient steps (default 1000)")
    s.add_argument("--seed", type=int, default=0, help="initialization seed (default 0)")
    s.add_argument("--out", help="coordinates CSV (default: tsne.csv next to the embeddings)")
    s.set_defaults(func=cmd_tsne)
    return p


def _fail(code: int, stage: str, message: str) -> int:
    sys.stderr.write(json.dumps({"code": code, "stage": stage, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        return _fail(1, e.stage, str(e))
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CadradsError as e:
        return _fail(e.exit_code, e.stage, str(e))
    except (FloatingPointError, OverflowError) as e:
        return _fail(NumericalError.exit_code, "numerics", str(e))
    except FileNotFoundError as e:
        return _fail(DataError.exit_code, "io", str(e))
    except (TypeError, ValueError) as e:
        # mostly wrongly typed config values reaching a constructor
        return _fail(ConfigError.exit_code, "config", str(e))
    return 0


if __name__ == "__main__":
    sys.exit(main())
