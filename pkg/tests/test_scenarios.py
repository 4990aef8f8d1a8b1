import filecmp

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import two_bus
from gridflow.grid import BusKind
from gridflow.powerflow import nr_solve
from gridflow.scenarios import (FLAG_COLUMNS, Dataset, GenerationError, ScenarioConfig, TopologyError,
                                apply_load_factors, build_graph_sample, compute_norm_stats, draw_load_factors,
                                generate_dataset, load_dataset, normalize, perturb_loads, run_scenario,
                                sample_network, sample_topology_perturbation, save_dataset, shift_tap,
                                split_dataset, split_sizes)


def test_forced_multiplier_boundary():
    net = two_bus(p=10.0)
    factors = np.ones((2, 2))
    factors[1, 0] = 1.4
    assert apply_load_factors(net, factors).buses[1].p_demand == pytest.approx(14.0)


def test_zero_range_is_identity(ieee30):
    assert perturb_loads(ieee30, np.random.default_rng(0), (0.0, 0.0)) == ieee30


def test_load_factor_moments():
    net = two_bus(p=1.0, q=0.5)
    rng = np.random.default_rng(42)
    eps = np.array([draw_load_factors(net, rng)[1] - 1.0 for _ in range(100_000)])
    assert abs(eps[:, 0].mean()) < 0.005
    assert eps.min() > -0.4 and eps.max() < 0.4


def test_only_load_buses_are_scaled(ieee30):
    f = draw_load_factors(ieee30, np.random.default_rng(1))
    for i, b in enumerate(ieee30.buses):
        if b.p_demand == 0 and b.q_demand == 0:
            assert tuple(f[i]) == (1.0, 1.0)


def test_bridge_only_network_has_no_outage():
    rng = np.random.default_rng(0)
    with pytest.raises(TopologyError):
        for _ in range(50):
            sample_topology_perturbation(two_bus(), rng)


def test_tap_shift_arithmetic(ieee30):
    assert shift_tap(two_bus(), 0, 2, 0.0125).branches[0].tap == pytest.approx(1.025)


def test_graph_sample_shapes(ieee30):
    s = build_graph_sample(ieee30, nr_solve(ieee30))
    assert s.node_features.shape == (30, 7)
    assert s.edge_list.shape == (82, 2)
    assert s.targets.shape == (30, 2)


def test_feature_encoding(ieee30):
    s = build_graph_sample(ieee30, nr_solve(ieee30))
    for i, b in enumerate(ieee30.buses):
        row = s.node_features[i]
        if b.kind is BusKind.SLACK:
            assert tuple(row[4:]) == (0, 0, 1)
            assert row[2] == b.v_setpoint and row[3] == b.theta_setpoint
        elif b.kind is BusKind.PQ:
            assert tuple(row[4:]) == (1, 0, 0)
            assert row[2] == 1.0 and row[3] == 0.0
        else:
            assert tuple(row[4:]) == (0, 1, 0)


def test_non_converged_sample_rejected():
    net = two_bus(p=10.0)
    with pytest.raises(ValueError):
        build_graph_sample(net, nr_solve(net))


@pytest.fixture(scope="module")
def small_dataset():
    from gridflow.grid import load_case
    ds = generate_dataset(load_case("ieee30"), ScenarioConfig(samples=100, seed=3))
    return split_dataset(ds, seed=3)


def test_exact_sample_count(small_dataset):
    assert len(small_dataset.samples) == 100
    for s in small_dataset.samples:
        assert np.all((s.targets[:, 0] > 0.8) & (s.targets[:, 0] < 1.2))


def test_sample_network_reproduces_targets(small_dataset):
    for s in small_dataset.samples[:10]:
        sol = nr_solve(sample_network(small_dataset.base, s))
        np.testing.assert_allclose(sol.state.v, s.targets[:, 0], atol=1e-12)


def test_run_scenario_is_pure(ieee30):
    cfg = ScenarioConfig(samples=1, seed=9)
    a, b = run_scenario(ieee30, cfg, 17), run_scenario(ieee30, cfg, 17)
    np.testing.assert_array_equal(a.targets, b.targets)
    np.testing.assert_array_equal(a.load_factors, b.load_factors)


def test_worker_count_does_not_change_dataset(ieee30, tmp_path):
    cfg = ScenarioConfig(samples=60, seed=5, topology_fraction=0.2)
    for w in (1, 3):
        ds = split_dataset(generate_dataset(ieee30, cfg, workers=w, chunk=16), seed=5)
        save_dataset(ds, tmp_path / f"w{w}")
    for name in ("samples.jsonl", "dataset.json"):
        assert filecmp.cmp(tmp_path / "w1" / name, tmp_path / "w3" / name, shallow=False)


def test_save_load_round_trip(small_dataset, tmp_path):
    save_dataset(small_dataset, tmp_path / "a")
    again = load_dataset(tmp_path / "a")
    save_dataset(again, tmp_path / "b")
    for name in ("samples.jsonl", "dataset.json"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)


def test_invalid_load_range_rejected():
    with pytest.raises(ValueError):
        ScenarioConfig(load_range=(-1.5, 0.0))


def test_unsolvable_base_aborts(ieee30):
    heavy = apply_load_factors(ieee30, np.full((30, 2), 4.0))
    with pytest.raises(GenerationError):
        generate_dataset(heavy, ScenarioConfig(samples=10, seed=0))


def test_discard_window_abort(ieee30):
    # base solves but nearly every perturbed scenario collapses
    stressed = apply_load_factors(ieee30, np.full((30, 2), 2.6))
    assert nr_solve(stressed).converged
    with pytest.raises(GenerationError, match="discard rate"):
        generate_dataset(stressed, ScenarioConfig(load_range=(0.3, 0.4), samples=1500, seed=0), chunk=256)


def test_split_sizes_examples():
    assert split_sizes(2000) == (1400, 300, 300)
    assert split_sizes(10) == (7, 1, 2)


@given(st.integers(7, 5000))
def test_split_sizes_partition(n):
    a, b, c = split_sizes(n)
    assert a + b + c == n and min(a, b, c) >= 0
    assert abs(a - 0.7 * n) <= 1 and abs(b - 0.15 * n) <= 1


def test_empty_split_is_an_error(ieee30):
    ds = Dataset([build_graph_sample(ieee30, nr_solve(ieee30), i) for i in range(3)])
    with pytest.raises(ValueError, match="empty split"):
        split_dataset(ds)


def test_splits_are_disjoint_and_stats_come_from_train(small_dataset):
    ids = {k: {s.scenario_id for s in small_dataset.split(k)} for k in ("train", "val", "test")}
    assert not (ids["train"] & ids["val"] or ids["train"] & ids["test"] or ids["val"] & ids["test"])
    assert small_dataset.norm_stats == compute_norm_stats(small_dataset.split("train"))


def test_train_split_is_standardized(small_dataset):
    x = np.concatenate([normalize(s.node_features, small_dataset.norm_stats)
                        for s in small_dataset.split("train")])
    stats = small_dataset.norm_stats
    for j in range(7):
        if j in FLAG_COLUMNS:
            raw = np.concatenate([s.node_features[:, j] for s in small_dataset.split("train")])
            np.testing.assert_array_equal(x[:, j], raw)
        elif not stats["constant"][j]:
            assert abs(x[:, j].mean()) < 1e-10
            assert abs(x[:, j].std() - 1) < 1e-10
