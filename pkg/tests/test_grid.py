import numpy as np
import pytest

from conftest import bfs_components, two_bus
from gridflow.grid import (Branch, Bus, BusKind, CaseParseError, Network, NetworkValidationError, build_ybus,
                           check_connectivity, is_connected, load_case, parse_matpower_case,
                           serialize_matpower_case)
from gridflow.scenarios import sample_topology_perturbation


def test_ieee30_counts(ieee30):
    assert ieee30.n_bus == 30
    assert len(ieee30.branches) == 41
    assert len(ieee30.generators) == 6
    assert sum(k is BusKind.SLACK for k in ieee30.kinds) == 1
    assert sum(k is BusKind.PV for k in ieee30.kinds) == 5


def test_ieee30_per_unit(ieee30):
    # bus 2 carries 21.7 MW / 12.7 MVAr on a 100 MVA base
    assert ieee30.buses[1].p_demand == pytest.approx(0.217)
    assert ieee30.buses[1].q_demand == pytest.approx(0.127)
    assert ieee30.base_mva == 100.0


def test_two_bus_parse():
    text = """
function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	1	50	10	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1	100	1	250	10;
];
mpc.branch = [
	1	2	0	0.1	0	0	0	0	0	0	1	-360	360;
];
"""
    net = parse_matpower_case(text)
    assert net.n_bus == 2 and len(net.branches) == 1
    assert net.buses[1].p_demand == pytest.approx(0.5)
    assert net.branches[0].tap == 1.0


def test_corrupted_row_names_line():
    lines = serialize_matpower_case(load_case("ieee30")).splitlines()
    idx = next(i for i, ln in enumerate(lines) if ln.strip().startswith("mpc.branch")) + 3
    lines[idx] = "\t".join(lines[idx].split("\t")[:6]) + ";"
    with pytest.raises(CaseParseError, match=f"line {idx + 1}"):
        parse_matpower_case("\n".join(lines))


def test_no_slack_is_rejected():
    net = Network((Bus(0, BusKind.PQ), Bus(1, BusKind.PQ)), (Branch(0, 1, 0.0, 0.1),))
    with pytest.raises(NetworkValidationError):
        net.validate()


def test_duplicate_bus_ids_rejected():
    text = serialize_matpower_case(load_case("ieee30"))
    lines = text.splitlines()
    start = next(i for i, ln in enumerate(lines) if ln.strip().startswith("mpc.bus")) + 1
    lines.insert(start, lines[start + 1])
    with pytest.raises(NetworkValidationError):
        parse_matpower_case("\n".join(lines))


def test_round_trip_is_exact(ieee30):
    again = parse_matpower_case(serialize_matpower_case(ieee30), name=ieee30.name)
    assert again == ieee30


def test_json_round_trip(ieee30):
    assert Network.from_json(ieee30.to_json()) == ieee30


def test_two_bus_ybus_hand_values():
    Y = build_ybus(two_bus()).todense()
    assert np.all(Y.real == 0)
    assert Y.imag[0, 0] == pytest.approx(-10) and Y.imag[1, 1] == pytest.approx(-10)
    assert Y.imag[0, 1] == pytest.approx(10) and Y.imag[1, 0] == pytest.approx(10)


def test_zero_impedance_branch_rejected():
    net = Network((Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ)), (Branch(0, 1, 0.0, 0.0),))
    with pytest.raises(NetworkValidationError):
        build_ybus(net)


def test_no_branches_gives_shunt_diagonal():
    net = Network((Bus(0, BusKind.SLACK, shunt_g=0.1, shunt_b=0.2), Bus(1, BusKind.PQ, shunt_b=-0.3)), ())
    Y = build_ybus(net).todense()
    np.testing.assert_array_equal(Y, np.diag([0.1 + 0.2j, -0.3j]))


def test_ieee30_ybus_matches_dense_oracle(ieee30, fixture_json):
    ref = fixture_json("ieee30_ybus_dense.json")
    oracle = np.array(ref["real"]) + 1j * np.array(ref["imag"])
    np.testing.assert_allclose(build_ybus(ieee30).todense(), oracle, rtol=0, atol=1e-12)


def test_ieee30_row_sums_equal_shunt_and_charging(ieee30):
    Y = build_ybus(ieee30).todense()
    expected = np.array([complex(b.shunt_g, b.shunt_b) for b in ieee30.buses])
    for br in ieee30.branches:
        if not br.in_service:
            continue
        y = br.series_admittance
        # row sum of a branch's 2x2 block: charging plus the tap imbalance term
        expected[br.from_bus] += 0.5j * br.b_charging + y / br.tap ** 2 - y / br.tap
        expected[br.to_bus] += 0.5j * br.b_charging + y - y / br.tap
    np.testing.assert_allclose(Y.sum(axis=1), expected, atol=1e-10)


def test_ybus_symmetric_without_taps(ieee30):
    flat = ieee30
    for k, br in enumerate(ieee30.branches):
        flat = flat.with_branch(k, tap=1.0, shift=0.0)
    Y = build_ybus(flat).todense()
    np.testing.assert_allclose(Y, Y.T, atol=0)


def test_ybus_pattern_structurally_symmetric(ieee30):
    rows, cols, _ = build_ybus(ieee30).entries()
    pattern = set(zip(rows.tolist(), cols.tolist()))
    assert pattern == {(j, i) for i, j in pattern}


def test_ybus_independent_of_branch_order(ieee30):
    rng = np.random.default_rng(3)
    shuffled = Network(ieee30.buses, tuple(ieee30.branches[i] for i in rng.permutation(41)),
                       ieee30.base_mva, ieee30.generators)
    np.testing.assert_array_equal(build_ybus(shuffled).todense(), build_ybus(ieee30).todense())


def test_connectivity_ieee30(ieee30):
    comps = check_connectivity(ieee30)
    assert len(comps) == 1 and len(comps[0]) == 30


def test_connectivity_split_two_bus():
    comps = check_connectivity(two_bus(in_service=False))
    assert sorted(map(sorted, comps)) == [[0], [1]]
    assert not is_connected(two_bus(in_service=False))


def _bridges(net):
    out = []
    for k in range(len(net.branches)):
        if not is_connected(net.with_branch(k, in_service=False)):
            out.append(k)
    return out


def test_connectivity_matches_bfs_after_bridge_removal(ieee30):
    rng = np.random.default_rng(11)
    bridges = _bridges(ieee30)
    assert bridges
    for _ in range(5):
        k = int(rng.choice(bridges))
        net = ieee30.with_branch(k, in_service=False)
        edges = [(b.from_bus, b.to_bus) for b in net.branches if b.in_service]
        got = sorted(sorted(c) for c in check_connectivity(net))
        assert got == bfs_components(30, edges)
        assert len(got) == 2


def test_outage_draws_keep_ieee30_connected(ieee30):
    rng = np.random.default_rng(5)
    for _ in range(40):
        net, change = sample_topology_perturbation(ieee30, rng)
        edges = [(b.from_bus, b.to_bus) for b in net.branches if b.in_service]
        assert len(bfs_components(30, edges)) == 1
