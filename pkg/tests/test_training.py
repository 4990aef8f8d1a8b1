import csv
import math

import numpy as np
import pytest

from conftest import two_bus
from gridflow.autodiff import Tape
from gridflow.grid import load_case
from gridflow.models import Prediction
from gridflow.powerflow import flat_start, nr_solve
from gridflow.scenarios import ScenarioConfig, generate_dataset, split_dataset
from gridflow.training import (OptimizerState, PlateauScheduler, TrainConfig, _merge_terms, adam_step,
                               clip_gradients, global_norm, mse_loss, physics_residual, physics_residual_loss,
                               physics_terms, train)


def test_mse_loss_examples():
    t = np.array([[1.0, 0.1], [0.9, -0.2]])
    assert mse_loss(Prediction(t[:, 0], t[:, 1]), t) == 0.0
    assert mse_loss(Prediction(np.array([1.1]), np.array([0.0])), [[1.0, 0.0]]) == pytest.approx(0.01)
    pred = Prediction(np.array([1.1, 1.0]), np.array([0.0, 0.2]))
    assert mse_loss(pred, [[1.0, 0.0], [1.0, 0.0]]) == pytest.approx(0.025)


def test_physics_residual_examples(ieee30):
    sol = nr_solve(ieee30)
    assert physics_residual_loss(Prediction(sol.state.v, sol.state.theta), ieee30) <= 1e-15
    net = two_bus(p=0.5)
    start = flat_start(net)
    assert physics_residual_loss(Prediction(start.v, start.theta), net) == pytest.approx(0.125, abs=1e-15)


def test_physics_batch_is_mean_of_graphs(ieee30):
    rng = np.random.default_rng(0)
    nets = [two_bus(p=0.5), ieee30]
    preds = [np.column_stack([rng.uniform(0.95, 1.05, n.n_bus), rng.uniform(-0.1, 0.1, n.n_bus)]) for n in nets]
    parts, offset = [], 0
    for net in nets:
        parts.append(physics_terms(net, offset=offset))
        offset += net.n_bus
    terms, w = _merge_terms(parts)
    merged = float(physics_residual(Tape(False).constant(np.concatenate(preds)), terms, w).value)
    single = [physics_residual_loss(Prediction(p[:, 0], p[:, 1]), n) for p, n in zip(preds, nets)]
    assert merged == pytest.approx(np.mean(single), rel=1e-12)


def test_clipping():
    g = {"a": np.array([0.3]), "b": np.array([0.4])}
    assert clip_gradients(g, 1.0) is g
    out = clip_gradients({"w": np.array([3.0, 4.0])}, 1.0)
    np.testing.assert_allclose(out["w"], [0.6, 0.8], atol=1e-15)
    assert global_norm(out) == pytest.approx(1.0)


def test_adam_steps():
    params = {"w": np.array([2.0, -1.0])}
    st = OptimizerState.zeros_like(params)
    new, st = adam_step(params, {"w": np.zeros(2)}, st, 0.1)
    np.testing.assert_array_equal(new["w"], params["w"])
    assert st.step == 1
    new, _ = adam_step({"x": np.array(0.0)}, {"x": np.array(1.0)}, OptimizerState.zeros_like({"x": np.array(0.0)}),
                       0.1)
    assert float(new["x"]) == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_plateau_scheduler():
    s = PlateauScheduler(5e-5, 0.5, patience=3, min_lr=1e-6)
    for v in (1.0, 0.9, 0.8, 0.7, 0.6):
        assert s.step(v) == 5e-5
    s = PlateauScheduler(5e-5, 0.5, patience=3, min_lr=1e-6)
    lrs = [s.step(1.0) for _ in range(4)]
    assert lrs[-1] == 2.5e-5 and lrs[-2] == 5e-5
    s = PlateauScheduler(1e-6, 0.5, patience=1, min_lr=1e-6)
    assert [s.step(1.0) for _ in range(5)] == [1e-6] * 5


def test_config_rejects_zero_patience():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


@pytest.fixture(scope="module")
def tiny_dataset():
    ds = generate_dataset(load_case("ieee30"), ScenarioConfig(samples=40, seed=2))
    return split_dataset(ds, seed=2)


def test_patience_one_stops_after_second_worse_epoch(tiny_dataset, monkeypatch):
    from gridflow import training
    losses = iter([0.5, 0.7, 0.9, 1.0])
    monkeypatch.setattr(training, "evaluate_loss", lambda *a, **k: next(losses))
    ckpt, hist = train("ggnn", tiny_dataset, TrainConfig(patience=1, max_epochs=10, seed=1),
                       {"hidden": 4, "steps": 1, "readout": 4})
    assert len(hist.epochs) == 2 and hist.stopped_early
    assert hist.best_epoch == 1 and hist.best_val_loss == 0.5


def test_training_is_deterministic(tiny_dataset, tmp_path):
    cfg = TrainConfig(max_epochs=3, seed=5, learning_rate=1e-3)
    kw = {"hidden": 8, "steps": 2, "readout": 8}
    runs = [train("ggnn", tiny_dataset, cfg, kw) for _ in range(2)]
    for i, (_, hist) in enumerate(runs):
        hist.write_csv(tmp_path / f"h{i}.csv")
    assert (tmp_path / "h0.csv").read_bytes() == (tmp_path / "h1.csv").read_bytes()
    for k, v in runs[0][0].params.items():
        np.testing.assert_array_equal(v, runs[1][0].params[k])


def test_zero_physics_weight_equals_pure_mse(tiny_dataset):
    kw = {"hidden": 8, "steps": 2, "readout": 8}
    a = train("ggnn", tiny_dataset, TrainConfig(max_epochs=2, seed=3), kw)[1]
    b = train("ggnn", tiny_dataset, TrainConfig(max_epochs=2, seed=3, physics_loss_weight=0.0), kw)[1]
    assert [e.train_loss for e in a.epochs] == [e.train_loss for e in b.epochs]


def test_physics_weight_changes_loss(tiny_dataset):
    kw = {"hidden": 8, "steps": 2, "readout": 8}
    a = train("ggnn", tiny_dataset, TrainConfig(max_epochs=1, seed=3), kw)[1]
    b = train("ggnn", tiny_dataset, TrainConfig(max_epochs=1, seed=3, physics_loss_weight=0.1), kw)[1]
    assert b.epochs[0].train_loss > a.epochs[0].train_loss


def test_history_invariants(tiny_dataset, tmp_path):
    ckpt, hist = train("gcn", tiny_dataset, TrainConfig(max_epochs=4, seed=0, learning_rate=1e-3))
    assert hist.best_val_loss == min(e.val_loss for e in hist.epochs)
    assert hist.epochs[hist.best_epoch - 1].val_loss == hist.best_val_loss
    hist.write_csv(tmp_path / "h.csv")
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2", "3", "4"]
    assert all(math.isfinite(float(r["val_loss"])) for r in rows)
    assert ckpt.meta["best_epoch"] == hist.best_epoch
