"""Losses, AdamW, step LR schedule, the epoch loop, cross-validation and grid search."""

from __future__ import annotations

import copy
import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import StackedSample, augment, num_classes
from .errors import ConfigError, EmptyClass, InvalidParams, NonFiniteLoss, ShapeMismatch
from .model import backward, forward, network_from_config, save_checkpoint
from .rng import substream, torch_generator

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


# --------------------------------------------------------------------------- #
# hyperparameters
# --------------------------------------------------------------------------- #

@dataclass
class HyperParams:
    lr: float = 1e-4
    lr_decay_epoch: int = 30
    lr_after_decay: float = 1e-5
    dropout: float = 0.5
    weight_decay: float = 0.1
    label_smoothing: float = 0.1
    epochs: int = 50
    batch_size: int = 16

    def validate(self) -> "HyperParams":
        if self.lr <= 0 or self.lr_after_decay <= 0:
            raise InvalidParams("learning rates must be positive")
        if self.lr_after_decay > self.lr:
            raise InvalidParams("lr_after_decay must not exceed lr")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidParams("dropout must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidParams("weight_decay must be non-negative")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise InvalidParams("label_smoothing must lie in [0, 0.5)")
        if self.epochs < 0 or self.batch_size < 1 or self.lr_decay_epoch < 1:
            raise InvalidParams("epochs >= 0, batch_size >= 1 and lr_decay_epoch >= 1 required")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "HyperParams":
        unknown = sorted(set(doc) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown hyperparameter(s): {', '.join(unknown)}")
        return cls(**doc).validate()


# best grid cells reported for the two experiments
TABLE1 = {
    "binary": HyperParams(lr=1e-4, lr_decay_epoch=30, lr_after_decay=1e-5, dropout=0.5,
                          weight_decay=0.1, label_smoothing=0.1),
    "multi": HyperParams(lr=1e-4, lr_decay_epoch=30, lr_after_decay=1e-5, dropout=0.3,
                         weight_decay=0.01, label_smoothing=0.2),
}


@dataclass
class GridSpace:
    lr: tuple = (1e-3, 1e-4, 1e-5)
    dropout: tuple = (0.1, 0.3, 0.5)
    weight_decay: tuple = (1e-1, 1e-2)
    lr_decay_epoch: tuple = (20, 30)
    label_smoothing: tuple = (0.1, 0.2)
    decay_factor: float = 0.1

    def combinations(self, base: HyperParams | None = None) -> list:
        """Cartesian product in field order; the decayed lr is ``lr * decay_factor``."""
        base = base or HyperParams()
        out = []
        for lr, do, wd, de, ls in itertools.product(self.lr, self.dropout, self.weight_decay,
                                                    self.lr_decay_epoch, self.label_smoothing):
            out.append(replace(base, lr=lr, lr_after_decay=lr * self.decay_factor, dropout=do,
                               weight_decay=wd, lr_decay_epoch=de, label_smoothing=ls).validate())
        return out

    def __len__(self):
        return len(self.lr) * len(self.dropout) * len(self.weight_decay) * len(self.lr_decay_epoch) \
            * len(self.label_smoothing)

    @classmethod
    def from_dict(cls, doc: dict) -> "GridSpace":
        unknown = sorted(set(doc) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown grid key(s): {', '.join(unknown)}")
        vals = {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()}
        space = cls(**vals)
        if len(space) == 0:
            raise ConfigError("grid space is empty")
        return space


def lr_at(epoch: int, hp: HyperParams) -> float:
    """Single step decay: ``lr`` before ``lr_decay_epoch``, ``lr_after_decay`` from it on (1-based epochs)."""
    return hp.lr if epoch < hp.lr_decay_epoch else hp.lr_after_decay


# --------------------------------------------------------------------------- #
# loss
# --------------------------------------------------------------------------- #

def smooth_labels(one_hot, epsilon: float, k: int):
    return (1.0 - epsilon) * one_hot + epsilon / k


def class_weights(labels, k: int) -> np.ndarray:
    """Inverse-frequency weights ``N / (K n_k)`` rescaled to mean 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=k)[:k].astype(np.float64)
    if (counts == 0).any():
        raise EmptyClass(f"class(es) {np.flatnonzero(counts == 0).tolist()} have no training samples",
                         stage="training")
    raw = counts.sum() / (k * counts)
    return raw / raw.mean()


def loss(logits: torch.Tensor, targets, task: str, class_weights=None, epsilon: float = 0.0):
    """Smoothed (optionally class-weighted) cross-entropy, batch mean.

    Per sample: ``-sum_k w_k q_k log softmax(z)_k`` with ``q`` the smoothed
    target. Returns ``(value, dL/dlogits)``; both detached.
    """
    k = num_classes(task)
    if logits.ndim != 2 or logits.shape[1] != k:
        raise ShapeMismatch(f"{task} task expects (N, {k}) logits, got {tuple(logits.shape)}", stage="training")
    if class_weights is not None and task != "multi":
        raise InvalidParams("class weights apply to the multi task only")
    z = logits.detach()
    targets = torch.as_tensor(targets, dtype=torch.long)
    q = smooth_labels(F.one_hot(targets, k).to(z.dtype), epsilon, k)
    w = torch.ones(k, dtype=z.dtype) if class_weights is None else torch.as_tensor(class_weights, dtype=z.dtype)
    wq = w * q
    logp = torch.log_softmax(z, dim=1)
    n = z.shape[0]
    value = -(wq * logp).sum() / n
    if not torch.isfinite(value):
        raise NonFiniteLoss("loss is not finite", stage="training")
    grad = (logp.exp() * wq.sum(dim=1, keepdim=True) - wq) / n
    return float(value), grad


# --------------------------------------------------------------------------- #
# optimizer
# --------------------------------------------------------------------------- #

def decay_mask(model: nn.Module) -> dict:
    """True for parameters that receive weight decay (not norms, biases or relative-bias tables)."""
    no_decay = set()
    for mname, m in model.named_modules():
        if isinstance(m, (nn.BatchNorm2d, nn.LayerNorm, nn.GroupNorm)):
            for pname, _ in m.named_parameters(recurse=False):
                no_decay.add(f"{mname}.{pname}" if mname else pname)
    mask = {}
    for name, p in model.named_parameters():
        mask[name] = not (name in no_decay or name.endswith("bias") or "relative_bias" in name)
    return mask


def adamw_step(params: dict, grads: dict, state: dict, lr: float, weight_decay: float, t: int,
               decay: dict | None = None, betas=BETAS, eps=ADAM_EPS) -> None:
    """One in-place AdamW update with decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``; ``state`` maps
    names to ``(m, v)`` and is created on first use.
    """
    if t < 1:
        raise InvalidParams("AdamW step counter starts at 1")
    b1, b2 = betas
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            if name not in state:
                state[name] = (torch.zeros_like(p), torch.zeros_like(p))
            m, v = state[name]
            if m.shape != p.shape:
                raise ShapeMismatch(f"optimizer state for {name} does not match the parameter shape")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            update = m_hat / (v_hat.sqrt() + eps)
            if decay is None or decay[name]:
                update = update + weight_decay * p
            p.sub_(lr * update)


# --------------------------------------------------------------------------- #
# epoch loop
# --------------------------------------------------------------------------- #

@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainRunResult:
    seed: int
    config: dict
    hyperparams: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float("nan")
    best_state: dict = field(default_factory=dict, repr=False)
    checkpoint: Path | None = None

    def build_model(self) -> nn.Module:
        model = network_from_config(self.config)
        model.load_state_dict(self.best_state)
        return model.eval()


def stack_samples(samples, task: str):
    if not samples:
        return np.zeros((0, 3, 1, 1), np.float32), np.zeros(0, np.int64)
    x = np.stack([s.data for s in samples]).astype(np.float32)
    y = np.array([s.label(task) for s in samples], dtype=np.int64)
    return x, y


def predict_logits(model: nn.Module, x: np.ndarray, batch: int = 64):
    """Eval-mode logits and embeddings for an ``N x 3 x S x S`` array."""
    dtype = next(model.parameters()).dtype
    logits, embs = [], []
    with torch.no_grad():
        for i in range(0, len(x), batch):
            out = forward(model, torch.as_tensor(x[i:i + batch]).to(dtype), "eval")
            logits.append(out.logits)
            embs.append(out.embedding)
    if not logits:
        return torch.zeros(0), torch.zeros(0)
    return torch.cat(logits), torch.cat(embs)


def _evaluate(model, x, y, task, weights, eps):
    if len(x) == 0:
        return float("nan"), float("nan")
    logits, _ = predict_logits(model, x)
    value, _ = loss(logits, y, task, weights, eps)
    acc = float((logits.argmax(1).numpy() == y).mean())
    return value, acc


def _prepare_config(model_config, task, hp):
    cfg = replace(model_config, num_classes=num_classes(task), dropout_rate=hp.dropout)
    return cfg.validate() if hasattr(cfg, "validate") else cfg


def init_model(model_config, seed: int) -> nn.Module:
    """Build a network with weights drawn from the seed's ``init`` sub-stream."""
    init_seed = int(substream(seed, "init").integers(0, 2**62))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        return network_from_config(model_config.to_dict())


def write_epoch_log(path, epochs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"])
        for e in epochs:
            w.writerow([e.epoch, repr(e.lr), repr(e.train_loss), repr(e.train_acc), repr(e.val_loss), repr(e.val_acc)])


def fit(model_config, hp: HyperParams, train_samples, val_samples, seed: int, task: str = "binary", *,
        run_dir=None, augment_train: bool = True, use_class_weights: bool = True, meta: dict | None = None,
        progress=None) -> TrainRunResult:
    """Train one network and keep the epoch with the best validation accuracy.

    Every random draw comes from ``seed``: initialization (``init``), batch
    order (``shuffle/<epoch>``), augmentation (``augment/<epoch>``) and
    dropout (``dropout/<epoch>``). Ties in validation accuracy go to the
    later epoch. With no validation samples the last epoch is kept.
    """
    hp.validate()
    train_patients = {s.patient_id for s in train_samples}
    if train_patients & {s.patient_id for s in val_samples}:
        raise InvalidParams("training and validation sets share patients", stage="training")
    cfg = _prepare_config(model_config, task, hp)
    model = init_model(cfg, seed)
    params = dict(model.named_parameters())
    mask = decay_mask(model)
    state: dict = {}

    x_train, y_train = stack_samples(train_samples, task)
    x_val, y_val = stack_samples(val_samples, task)
    k = num_classes(task)
    weights = class_weights(y_train, k) if (task == "multi" and use_class_weights and len(y_train)) else None
    eps = hp.label_smoothing

    result = TrainRunResult(seed=seed, config=cfg.to_dict(), hyperparams=hp.to_dict())
    result.best_state = copy.deepcopy(model.state_dict())
    result.best_val_acc = _evaluate(model, x_val, y_val, task, weights, eps)[1]
    best_key = -math.inf
    t = 0
    for epoch in range(1, hp.epochs + 1):
        lr = lr_at(epoch, hp)
        order = substream(seed, "shuffle", epoch).permutation(len(x_train))
        aug_rng = substream(seed, "augment", epoch)
        drop_gen = torch_generator(seed, "dropout", epoch)
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, len(order), hp.batch_size)):
            idx = order[start:start + hp.batch_size]
            if augment_train:
                xb = np.stack([augment(train_samples[i], aug_rng).data for i in idx]).astype(np.float32)
            else:
                xb = x_train[idx]
            yb = y_train[idx]
            out = forward(model, torch.from_numpy(xb), "train", drop_gen)
            try:
                value, grad = loss(out.logits, yb, task, weights, eps)
            except NonFiniteLoss as e:
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {b}", stage="training") from e
            grads = backward(model, out, grad)
            t += 1
            adamw_step(params, grads, state, lr, hp.weight_decay, t, mask)
            total_loss += value * len(idx)
            correct += int((out.logits.detach().argmax(1).numpy() == yb).sum())
        n = max(len(x_train), 1)
        val_loss, val_acc = _evaluate(model, x_val, y_val, task, weights, eps)
        entry = EpochLog(epoch, lr, total_loss / n, correct / n, val_loss, val_acc)
        result.epochs.append(entry)
        key = val_acc if len(x_val) else 0.0
        if key >= best_key:
            best_key = key
            result.best_epoch = epoch
            result.best_val_acc = val_acc
            result.best_state = copy.deepcopy(model.state_dict())
        if progress:
            progress(entry)
        log.info("epoch %d lr %.2g loss %.4f acc %.3f val_loss %.4f val_acc %.3f",
                 epoch, lr, entry.train_loss, entry.train_acc, val_loss, val_acc)

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_epoch_log(run_dir / "epochs.csv", result.epochs)
        best = network_from_config(result.config)
        best.load_state_dict(result.best_state)
        info = {"task": task, "seed": seed, "best_epoch": result.best_epoch,
                "best_val_acc": result.best_val_acc, "hyperparams": hp.to_dict(), **(meta or {})}
        save_checkpoint(run_dir / "best.ckpt", best, result.config, info)
        result.checkpoint = run_dir / "best.ckpt"
    return result


# --------------------------------------------------------------------------- #
# cross-validation and grid search
# --------------------------------------------------------------------------- #

@dataclass
class CVResult:
    fold_accuracies: list
    runs: list = field(repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracies))


def fold_samples(samples, split, k: int):
    val_ids = set(split.fold_members(k))
    train_ids = set(split.train) - val_ids
    train = [s for s in samples if s.patient_id in train_ids]
    val = [s for s in samples if s.patient_id in val_ids]
    return train, val


def cross_validate(model_config, hp: HyperParams, samples, split, seed: int, task: str = "binary",
                   folds=None, **fit_kwargs) -> CVResult:
    """One fit per fold (validate on fold k, train on the rest).

    Every fold uses the same seed, so a fold's accuracy depends only on its
    membership, not on its position in the loop.
    """
    folds = list(range(split.n_folds())) if folds is None else list(folds)
    runs, accs = [], []
    for k in folds:
        train, val = fold_samples(samples, split, k)
        run = fit(model_config, hp, train, val, seed, task, **fit_kwargs)
        runs.append(run)
        accs.append(run.best_val_acc)
    return CVResult(accs, runs)


def grid_search(model_config, space: GridSpace, samples, split, seed: int, task: str = "binary",
                folds=None, base: HyperParams | None = None, table_path=None, **fit_kwargs):
    """Cross-validate every combination and return ``(best, rows)``.

    The best cell maximizes mean validation accuracy; ties go to the lower
    lr, then the higher weight decay, then enumeration order.
    """
    combos = space.combinations(base)
    if not combos:
        raise ConfigError("grid space is empty")
    rows = []
    for i, hp in enumerate(combos):
        cv = cross_validate(model_config, hp, samples, split, seed, task, folds, **fit_kwargs)
        rows.append({"index": i, **hp.to_dict(), "mean_val_acc": cv.mean, "std_val_acc": cv.std,
                     "fold_val_acc": cv.fold_accuracies})
    best_row = min(rows, key=lambda r: (-r["mean_val_acc"], r["lr"], -r["weight_decay"], r["index"]))
    if table_path is not None:
        write_grid_table(table_path, rows)
    return combos[best_row["index"]], rows


def write_grid_table(path, rows) -> None:
    keys = ["index"] + [f.name for f in fields(HyperParams)] + ["mean_val_acc", "std_val_acc", "fold_val_acc"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([";".join(repr(a) for a in r[k]) if k == "fold_val_acc" else repr(r[k]) for k in keys])
