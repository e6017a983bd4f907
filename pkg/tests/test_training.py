import math
import time

import numpy as np
import pytest
import torch

from cadrads import training
from cadrads.dataset import SplitAssignment, StackedSample
from cadrads.errors import ConfigError, EmptyClass, InvalidParams, ShapeMismatch
from cadrads.model import load_network, forward, preset
from cadrads.training import (CVResult, GridSpace, HyperParams, adamw_step, class_weights, cross_validate,
                              decay_mask, fit, grid_search, loss, lr_at, smooth_labels)

NANO = preset("nano")


def _toy_samples(n, seed=0, size=56, n_patients=None, noise=0.05):
    """Linearly separable: class 1 images are brighter than class 0."""
    rng = np.random.default_rng(seed)
    n_patients = n_patients or n
    out = []
    for i in range(n):
        y = i % 2
        data = (0.3 + 0.4 * y + noise * rng.standard_normal((3, size, size))).clip(0, 1).astype(np.float32)
        pid = f"T{i % n_patients:03d}"
        out.append(StackedSample(pid, i // n_patients, data, y, y, 4 * y))
    return out


# ---------------------------------------------------------------- labels and loss

def test_smooth_labels_examples():
    np.testing.assert_allclose(smooth_labels(np.array([1.0, 0.0]), 0.1, 2), [0.95, 0.05])
    oh = np.array([0.0, 0.0, 1.0])
    np.testing.assert_array_equal(smooth_labels(oh, 0.0, 3), oh)
    np.testing.assert_allclose(smooth_labels(oh, 0.2, 3), [0.0667, 0.0667, 0.8667], atol=5e-5)


def test_loss_at_target_distribution_is_entropy():
    q = np.array([0.95, 0.05])
    logits = torch.tensor(np.tile(np.log(q), (3, 1)))
    value, grad = loss(logits, [0, 0, 0], "binary", epsilon=0.1)
    assert value == pytest.approx(-(q * np.log(q)).sum(), abs=1e-12)
    assert float(grad.abs().max()) < 1e-12


def test_loss_uniform_logits_is_ln2():
    value, _ = loss(torch.zeros(4, 2, dtype=torch.float64), [0, 1, 1, 0], "binary")
    assert value == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("weighted", [False, True])
def test_loss_gradient_finite_difference(weighted):
    rng = np.random.default_rng(0)
    z = torch.tensor(rng.standard_normal((5, 3)))
    y = [0, 2, 1, 1, 2]
    w = class_weights([0, 1, 1, 2, 2, 2], 3) if weighted else None
    _, grad = loss(z, y, "multi", w, 0.2)
    h = 1e-6
    for i in range(5):
        for k in range(3):
            zp, zm = z.clone(), z.clone()
            zp[i, k] += h
            zm[i, k] -= h
            num = (loss(zp, y, "multi", w, 0.2)[0] - loss(zm, y, "multi", w, 0.2)[0]) / (2 * h)
            assert abs(num - float(grad[i, k])) < 1e-6


def test_loss_guards():
    with pytest.raises(ShapeMismatch):
        loss(torch.zeros(2, 3), [0, 1], "binary")
    with pytest.raises(InvalidParams):
        loss(torch.zeros(2, 2), [0, 1], "binary", class_weights=[1.0, 1.0])
    with pytest.raises(training.NonFiniteLoss):
        loss(torch.tensor([[float("nan"), 0.0]]), [0], "binary")


def test_class_weights_examples():
    np.testing.assert_allclose(class_weights([0, 1, 2] * 4, 3), [1, 1, 1])
    np.testing.assert_allclose(class_weights([0] * 10 + [1] * 30, 2), [1.5, 0.5])
    with pytest.raises(EmptyClass):
        class_weights([0, 0, 2], 3)


def test_smoothed_loss_floor_reached_at_saturation():
    # free logits driven by AdamW settle at the entropy of the smoothed target
    z = torch.zeros(4, 3, dtype=torch.float64)
    y = [0, 1, 2, 1]
    state = {}
    for t in range(1, 2001):
        _, g = loss(z, y, "multi", epsilon=0.2)
        adamw_step({"z": z}, {"z": g}, state, 0.05, 0.0, t)
    q = smooth_labels(np.eye(3)[0], 0.2, 3)
    assert loss(z, y, "multi", epsilon=0.2)[0] == pytest.approx(-(q * np.log(q)).sum(), abs=1e-6)


# ---------------------------------------------------------------- optimizer and schedule

def test_adamw_zero_gradient_no_decay_is_fixed_point():
    p = torch.randn(3, 3)
    before = p.clone()
    state = {}
    for t in (1, 2, 3):
        adamw_step({"w": p}, {"w": torch.zeros_like(p)}, state, 1e-2, 0.0, t)
    assert torch.equal(p, before)


def test_adamw_scalar_two_steps_by_hand():
    p = torch.tensor([1.0], dtype=torch.float64)
    state = {}
    lr, wd = 0.1, 0.01
    g1, g2 = 0.5, -0.2
    adamw_step({"w": p}, {"w": torch.tensor([g1], dtype=torch.float64)}, state, lr, wd, 1)
    adamw_step({"w": p}, {"w": torch.tensor([g2], dtype=torch.float64)}, state, lr, wd, 2)
    # hand recurrence
    w = 1.0
    m = 0.1 * g1
    v = 0.001 * g1 ** 2
    w = w - lr * ((m / 0.1) / (math.sqrt(v / 0.001) + 1e-8) + wd * w)
    m = 0.9 * m + 0.1 * g2
    v = 0.999 * v + 0.001 * g2 ** 2
    w = w - lr * ((m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8) + wd * w)
    assert float(p) == pytest.approx(w, rel=1e-14)


def test_adamw_decoupled_decay_shrinks_geometrically():
    p = torch.tensor([2.0], dtype=torch.float64)
    state = {}
    for t in range(1, 6):
        adamw_step({"w": p}, {"w": torch.zeros_like(p)}, state, 0.1, 0.5, t)
    assert float(p) == pytest.approx(2.0 * (1 - 0.05) ** 5, rel=1e-14)


def test_adamw_zero_lr_changes_nothing():
    p = torch.randn(4)
    before = p.clone()
    adamw_step({"w": p}, {"w": torch.randn(4)}, {}, 0.0, 0.1, 1)
    assert torch.equal(p, before)


def test_adamw_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adamw_step({"w": torch.zeros(3)}, {"w": torch.zeros(4)}, {}, 0.1, 0.0, 1)


def test_decay_mask_excludes_norms_biases_and_relative_tables():
    model = training.init_model(NANO, 0)
    mask = decay_mask(model)
    assert not mask["stem.bn.weight"]
    assert not mask["stages.0.0.block_attn.layer.norm1.weight"]
    assert not mask["stages.0.0.block_attn.layer.relative_bias"]
    assert not mask["head.classifier.bias"]
    assert mask["head.classifier.weight"]
    assert mask["stages.0.0.mbconv.expand.weight"]


def test_lr_at():
    hp = HyperParams(lr=1e-4, lr_after_decay=1e-5, lr_decay_epoch=30)
    assert lr_at(29, hp) == 1e-4
    assert lr_at(30, hp) == 1e-5
    hp = HyperParams(lr=1e-3, lr_after_decay=1e-4, lr_decay_epoch=60, epochs=50)
    assert {lr_at(e, hp) for e in range(1, 51)} == {1e-3}


def test_hyperparams_validation():
    with pytest.raises(InvalidParams):
        HyperParams(lr=1e-5, lr_after_decay=1e-4).validate()
    with pytest.raises(ConfigError):
        HyperParams.from_dict({"learning_rate": 0.1})


def test_grid_space_size_and_order():
    combos = GridSpace().combinations()
    assert len(combos) == len(GridSpace()) == 72
    assert combos[0].lr == 1e-3 and combos[0].lr_after_decay == pytest.approx(1e-4)
    assert combos[1].label_smoothing == 0.2
    assert len({tuple(sorted(c.to_dict().items())) for c in combos}) == 72


# ---------------------------------------------------------------- fit

FAST = HyperParams(lr=1e-3, lr_after_decay=1e-4, lr_decay_epoch=10, dropout=0.0, weight_decay=0.01,
                   label_smoothing=0.0, epochs=2, batch_size=8)


def test_fit_deterministic():
    train, val = _toy_samples(16, 0), _toy_samples(8, 1, n_patients=8)
    val = [StackedSample("V" + s.patient_id, s.view, s.data, s.label_binary, s.label_multi, s.cadrads)
           for s in val]
    a = fit(NANO, FAST, train, val, seed=5)
    b = fit(NANO, FAST, train, val, seed=5)
    assert a.epochs == b.epochs
    assert all(torch.equal(a.best_state[k], b.best_state[k]) for k in a.best_state)
    c = fit(NANO, FAST, train, val, seed=6)
    assert c.epochs != a.epochs


def test_fit_zero_epochs_keeps_initial_model(tmp_path):
    hp = HyperParams(epochs=0, dropout=0.0)
    res = fit(NANO, hp, _toy_samples(4), [], seed=1, run_dir=tmp_path)
    assert res.epochs == [] and res.best_epoch == 0
    init = training.init_model(training._prepare_config(NANO, "binary", hp), 1)
    assert all(torch.equal(init.state_dict()[k], v) for k, v in res.best_state.items())
    assert (tmp_path / "best.ckpt").exists()
    assert (tmp_path / "epochs.csv").read_text().strip() == "epoch,lr,train_loss,train_acc,val_loss,val_acc"


def test_fit_rejects_shared_patients():
    s = _toy_samples(4)
    with pytest.raises(InvalidParams):
        fit(NANO, FAST, s, s[:1], seed=0)


def test_fit_sanity_separable():
    samples = _toy_samples(50, 3)
    hp = HyperParams(lr=1e-3, lr_after_decay=1e-3, lr_decay_epoch=100, dropout=0.0, weight_decay=0.0,
                     label_smoothing=0.0, epochs=20, batch_size=10)
    res = fit(NANO, hp, samples, [], seed=0, augment_train=False)
    model = res.build_model()
    x, y = training.stack_samples(samples, "binary")
    logits, _ = training.predict_logits(model, x)
    acc = float((logits.argmax(1).numpy() == y).mean())
    assert acc == 1.0


def test_training_loss_decreases_on_fixed_batch():
    model = training.init_model(training._prepare_config(NANO, "binary", FAST), 0)
    x, y = training.stack_samples(_toy_samples(8, 4, noise=0.2), "binary")
    params, mask, state = dict(model.named_parameters()), decay_mask(model), {}
    losses = []
    for t in range(1, 51):
        out = forward(model, torch.from_numpy(x), "train")
        value, g = loss(out.logits, y, "binary")
        losses.append(value)
        adamw_step(params, training.backward(model, out, g), state, 1e-3, 0.0, t)
    assert losses[-1] < losses[0]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_best_epoch_ties_go_to_latest():
    train = _toy_samples(8)
    val = [StackedSample("V0", 0, train[0].data, 0, 0, 0)]
    hp = HyperParams(lr=1e-12, lr_after_decay=1e-12, dropout=0.0, weight_decay=0.0, epochs=3, batch_size=8)
    res = fit(NANO, hp, train, val, seed=0, augment_train=False)
    assert len({e.val_acc for e in res.epochs}) == 1
    assert res.best_epoch == 3


def test_checkpoint_reload_is_bit_identical(tmp_path):
    train = _toy_samples(8)
    res = fit(NANO, FAST, train, [], seed=2, run_dir=tmp_path)
    model, header = load_network(res.checkpoint)
    assert header["meta"]["best_epoch"] == res.best_epoch
    x = torch.from_numpy(training.stack_samples(train, "binary")[0])
    assert torch.equal(forward(res.build_model(), x).logits, forward(model, x).logits)


def test_multi_task_uses_three_classes():
    samples = _toy_samples(6)
    samples = [StackedSample(s.patient_id, s.view, s.data, s.label_binary, i % 3, s.cadrads)
               for i, s in enumerate(samples)]
    hp = HyperParams(epochs=1, dropout=0.0, batch_size=6)
    res = fit(NANO, hp, samples, [], seed=0, task="multi")
    assert res.config["num_classes"] == 3


# ---------------------------------------------------------------- cross-validation and grid

def _toy_split(samples, folds):
    ids = sorted({s.patient_id for s in samples})
    return SplitAssignment(0, [], {pid: i % folds for i, pid in enumerate(ids)})


def test_cross_validate_ten_folds_and_fold_independence():
    samples = _toy_samples(20, 0)
    split = _toy_split(samples, 10)
    hp = HyperParams(epochs=0, dropout=0.0)
    cv = cross_validate(NANO, hp, samples, split, seed=0)
    assert len(cv.runs) == 10
    hp1 = HyperParams(lr=1e-3, lr_after_decay=1e-4, epochs=1, dropout=0.0, batch_size=8)
    fwd = cross_validate(NANO, hp1, samples, split, 0, folds=[0, 1, 2])
    rev = cross_validate(NANO, hp1, samples, split, 0, folds=[2, 1, 0])
    assert sorted(fwd.fold_accuracies) == sorted(rev.fold_accuracies)


def test_two_fold_smoke_run_is_fast():
    samples = _toy_samples(24, 0, n_patients=12)
    split = _toy_split(samples, 2)
    t0 = time.perf_counter()
    cv = cross_validate(NANO, FAST, samples, split, seed=0)
    assert len(cv.fold_accuracies) == 2
    assert time.perf_counter() - t0 < 300


def test_grid_search_singleton():
    samples = _toy_samples(8)
    space = GridSpace(lr=(1e-3,), dropout=(0.1,), weight_decay=(0.01,), lr_decay_epoch=(20,),
                      label_smoothing=(0.1,))
    best, rows = grid_search(NANO, space, samples, _toy_split(samples, 2), 0, base=HyperParams(epochs=0))
    assert len(rows) == 1 and best.lr == 1e-3 and best.dropout == 0.1


def _fake_cv(table):
    def cv(model_config, hp, samples, split, seed, task="binary", folds=None, **kw):
        accs = table[(hp.lr, hp.weight_decay)]
        return CVResult(list(accs), [])
    return cv


def test_grid_search_dominance_and_tie_breaks(monkeypatch, tmp_path):
    space = GridSpace(lr=(1e-3, 1e-4), dropout=(0.1,), weight_decay=(0.1, 0.01), lr_decay_epoch=(20,),
                      label_smoothing=(0.1,))
    # strictly dominant cell wins
    monkeypatch.setattr(training, "cross_validate", _fake_cv(
        {(1e-3, 0.1): [0.6, 0.7], (1e-3, 0.01): [0.9, 0.8], (1e-4, 0.1): [0.5, 0.5], (1e-4, 0.01): [0.6, 0.6]}))
    best, rows = grid_search(NANO, space, [], None, 0, table_path=tmp_path / "grid.csv")
    assert (best.lr, best.weight_decay) == (1e-3, 0.01)
    assert len((tmp_path / "grid.csv").read_text().splitlines()) == 5
    # equal means: lower lr first, then higher weight decay
    monkeypatch.setattr(training, "cross_validate", _fake_cv({k: [0.75, 0.75] for k in
                                                              [(1e-3, 0.1), (1e-3, 0.01), (1e-4, 0.1), (1e-4, 0.01)]}))
    best, _ = grid_search(NANO, space, [], None, 0)
    assert (best.lr, best.weight_decay) == (1e-4, 0.1)
