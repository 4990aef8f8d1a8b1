"""Perturbed operating scenarios, graph samples and dataset I/O."""

from __future__ import annotations

import json
import logging
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .grid import BusKind, Network, is_connected
from .powerflow import PFSolution, SolverOptions, nr_solve

logger = logging.getLogger(__name__)

N_FEATURES = 7
FEATURE_NAMES = ("p", "q", "v_init", "theta_init", "is_pq", "is_pv", "is_slack")
FLAG_COLUMNS = (4, 5, 6)
FEASIBLE_V = (0.8, 1.2)
DISCARD_WINDOW = 1000
MAX_DISCARD_RATE = 0.5


class TopologyError(RuntimeError):
    """No admissible topology change exists for this network."""


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    load_range: tuple[float, float] = (-0.4, 0.4)
    topology_fraction: float = 0.05
    samples: int = 12000
    seed: int = 0
    tap_step: float = 0.0125
    tap_max_steps: int = 2

    def __post_init__(self):
        lo, hi = self.load_range
        object.__setattr__(self, "load_range", (float(lo), float(hi)))
        if not -1 < lo <= hi:
            raise ValueError(f"load_range must satisfy -1 < low <= high, got {self.load_range}")
        if not 0 <= self.topology_fraction <= 1:
            raise ValueError("topology_fraction must be in [0, 1]")
        if self.samples < 1:
            raise ValueError("samples must be positive")
        if self.tap_max_steps < 1 or self.tap_step <= 0:
            raise ValueError("tap_step and tap_max_steps must be positive")


@dataclass(frozen=True)
class TopologyChange:
    kind: str  # "outage" or "tap"
    branch: int
    tap: float | None = None


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------


def load_buses(net: Network) -> list[int]:
    return [i for i, b in enumerate(net.buses) if b.p_demand != 0 or b.q_demand != 0]


def draw_load_factors(net: Network, rng: np.random.Generator, load_range=(-0.4, 0.4)) -> np.ndarray:
    """(n_bus, 2) multipliers 1 + eps; drawn bus by bus in ascending order, P before Q."""
    lo, hi = load_range
    factors = np.ones((net.n_bus, 2))
    for i in load_buses(net):
        factors[i, 0] = 1.0 + rng.uniform(lo, hi)
        factors[i, 1] = 1.0 + rng.uniform(lo, hi)
    return factors


def apply_load_factors(net: Network, factors: np.ndarray) -> Network:
    buses = tuple(
        replace(b, p_demand=b.p_demand * factors[i, 0], q_demand=b.q_demand * factors[i, 1])
        if (b.p_demand != 0 or b.q_demand != 0) else b
        for i, b in enumerate(net.buses)
    )
    return replace(net, buses=buses)


def perturb_loads(net: Network, rng: np.random.Generator, load_range=(-0.4, 0.4)) -> Network:
    return apply_load_factors(net, draw_load_factors(net, rng, load_range))


def shift_tap(net: Network, branch: int, k: int, step: float = 0.0125) -> Network:
    return net.with_branch(branch, tap=net.branches[branch].tap + k * step)


def apply_topology_change(net: Network, change: TopologyChange | None) -> Network:
    if change is None:
        return net
    if change.kind == "outage":
        return net.with_branch(change.branch, in_service=False)
    return net.with_branch(change.branch, tap=change.tap)


def sample_topology_perturbation(
    net: Network, rng: np.random.Generator, cfg: ScenarioConfig | None = None
) -> tuple[Network, TopologyChange]:
    """One N-1 line outage or one transformer tap shift, chosen with equal odds."""
    cfg = cfg or ScenarioConfig()
    transformers = [k for k, br in enumerate(net.branches) if br.in_service and br.tap != 1.0]
    use_tap = rng.random() < 0.5
    if use_tap and transformers:
        k_br = transformers[int(rng.integers(len(transformers)))]
        steps = [s for s in range(-cfg.tap_max_steps, cfg.tap_max_steps + 1) if s != 0]
        k = steps[int(rng.integers(len(steps)))]
        out = shift_tap(net, k_br, k, cfg.tap_step)
        return out, TopologyChange("tap", k_br, out.branches[k_br].tap)
    candidates = [k for k, br in enumerate(net.branches) if br.in_service]
    # drawing without replacement is rejection sampling that is sure to terminate
    for k_br in rng.permutation(candidates):
        out = net.with_branch(int(k_br), in_service=False)
        if is_connected(out):
            return out, TopologyChange("outage", int(k_br))
    raise TopologyError("every in-service branch is a bridge; no admissible outage")


# ---------------------------------------------------------------------------
# graph samples
# ---------------------------------------------------------------------------


@dataclass
class GraphSample:
    node_features: np.ndarray  # (N, 7)
    edge_list: np.ndarray  # (E, 2) int, (src, dst)
    targets: np.ndarray  # (N, 2): |V|, theta
    edge_features: np.ndarray | None = None  # (E, 2): |y|, angle(y)
    scenario_id: int = 0
    topology_perturbed: bool = False
    load_factors: np.ndarray | None = None
    topology_change: TopologyChange | None = None
    split: str | None = None

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    def to_dict(self) -> dict:
        d = {
            "scenario_id": self.scenario_id,
            "split": self.split,
            "topology_perturbed": self.topology_perturbed,
            "node_features": self.node_features.tolist(),
            "edge_list": self.edge_list.tolist(),
            "edge_features": None if self.edge_features is None else self.edge_features.tolist(),
            "targets": self.targets.tolist(),
            "load_factors": None if self.load_factors is None else self.load_factors.tolist(),
            "topology_change": None if self.topology_change is None else asdict(self.topology_change),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GraphSample":
        return cls(
            node_features=np.array(d["node_features"], dtype=float),
            edge_list=np.array(d["edge_list"], dtype=np.int64).reshape(-1, 2),
            targets=np.array(d["targets"], dtype=float),
            edge_features=None if d.get("edge_features") is None else np.array(d["edge_features"], dtype=float),
            scenario_id=d["scenario_id"],
            topology_perturbed=d["topology_perturbed"],
            load_factors=None if d.get("load_factors") is None else np.array(d["load_factors"], dtype=float),
            topology_change=None if d.get("topology_change") is None else TopologyChange(**d["topology_change"]),
            split=d.get("split"),
        )


def node_features(net: Network) -> np.ndarray:
    p_spec, q_spec = net.specified_injections()
    x = np.zeros((net.n_bus, N_FEATURES))
    for i, b in enumerate(net.buses):
        if b.kind is BusKind.PQ:
            x[i, :4] = (p_spec[i], q_spec[i], 1.0, 0.0)
            x[i, 4] = 1.0
        elif b.kind is BusKind.PV:
            x[i, :4] = (p_spec[i], 0.0, b.v_setpoint, 0.0)
            x[i, 5] = 1.0
        else:
            x[i, :4] = (0.0, 0.0, b.v_setpoint, b.theta_setpoint)
            x[i, 6] = 1.0
    return x


def edge_arrays(net: Network) -> tuple[np.ndarray, np.ndarray]:
    edges, feats = [], []
    for br in net.branches:
        if not br.in_service:
            continue
        y = br.series_admittance
        f = (abs(y), float(np.angle(y)))
        edges += [(br.from_bus, br.to_bus), (br.to_bus, br.from_bus)]
        feats += [f, f]
    return np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(feats, dtype=float).reshape(-1, 2)


def build_graph_sample(net: Network, sol: PFSolution, scenario_id: int = 0, **meta) -> GraphSample:
    if not sol.converged:
        raise ValueError("cannot build a sample from a non-converged solution")
    edges, feats = edge_arrays(net)
    targets = np.column_stack([sol.state.v, sol.state.theta])
    return GraphSample(node_features(net), edges, targets, feats, scenario_id=scenario_id, **meta)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def scenario_rng(seed: int, counter: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(counter)]))


def run_scenario(base: Network, cfg: ScenarioConfig, counter: int) -> GraphSample | None:
    """Solve one scenario; ``None`` when it is discarded."""
    rng = scenario_rng(cfg.seed, counter)
    factors = draw_load_factors(base, rng, cfg.load_range)
    net = apply_load_factors(base, factors)
    change = None
    if rng.random() < cfg.topology_fraction:
        try:
            net, change = sample_topology_perturbation(net, rng, cfg)
        except TopologyError:
            return None
    sol = nr_solve(net, SolverOptions())
    if not sol.converged:
        return None
    lo, hi = FEASIBLE_V
    if np.any(sol.state.v <= lo) or np.any(sol.state.v >= hi):
        return None
    return build_graph_sample(net, sol, scenario_id=counter, topology_perturbed=change is not None,
                              load_factors=factors, topology_change=change)


def _run_chunk(args) -> list[GraphSample | None]:
    base, cfg, start, stop = args
    return [run_scenario(base, cfg, c) for c in range(start, stop)]


@dataclass
class Dataset:
    samples: list[GraphSample]
    norm_stats: dict | None = None
    config: ScenarioConfig | None = None
    base: Network | None = None
    discarded: int = 0
    attempted: int = 0
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[GraphSample]:
        return [s for s in self.samples if s.split == name]

    @property
    def split_sizes(self) -> dict[str, int]:
        return {k: sum(1 for s in self.samples if s.split == k) for k in ("train", "val", "test")}


def generate_dataset(base: Network, cfg: ScenarioConfig, workers: int = 1, chunk: int = 64) -> Dataset:
    """Collect ``cfg.samples`` converged, feasible scenarios in counter order."""
    if not nr_solve(base).converged:
        raise GenerationError("base case does not solve from flat start")
    samples: list[GraphSample] = []
    window: deque[bool] = deque(maxlen=DISCARD_WINDOW)
    discarded = 0
    counter = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while len(samples) < cfg.samples:
            need = cfg.samples - len(samples)
            span = max(chunk, need + need // 4)
            if pool is None:
                results = _run_chunk((base, cfg, counter, counter + span))
            else:
                bounds = list(range(counter, counter + span, chunk)) + [counter + span]
                jobs = [(base, cfg, a, b) for a, b in zip(bounds[:-1], bounds[1:])]
                results = [r for part in pool.map(_run_chunk, jobs) for r in part]
            for res in results:
                if len(samples) == cfg.samples:
                    break
                counter += 1
                window.append(res is None)
                if res is None:
                    discarded += 1
                else:
                    samples.append(res)
                if len(window) == DISCARD_WINDOW and sum(window) > MAX_DISCARD_RATE * DISCARD_WINDOW:
                    raise GenerationError(
                        f"discard rate {sum(window) / DISCARD_WINDOW:.1%} over the last "
                        f"{DISCARD_WINDOW} scenarios (counter {counter}); check the scenario config"
                    )
    finally:
        if pool is not None:
            pool.shutdown()
    logger.info("generated %d samples, discarded %d", len(samples), discarded)
    return Dataset(samples, config=cfg, base=base, discarded=discarded, attempted=counter)


def split_sizes(n: int, fractions=(0.7, 0.15, 0.15)) -> tuple[int, int, int]:
    """Contiguous split sizes from rounded cumulative boundaries (half to even)."""
    fr = [Fraction(f).limit_denominator(10**6) for f in fractions]
    if sum(fr) != 1:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    b1 = round(fr[0] * n)
    b2 = round((fr[0] + fr[1]) * n)
    return b1, b2 - b1, n - b2


def compute_norm_stats(samples: list[GraphSample]) -> dict:
    x = np.concatenate([s.node_features for s in samples], axis=0)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = [bool(std[j] <= 1e-12) for j in range(N_FEATURES)]
    exempt = [j in FLAG_COLUMNS for j in range(N_FEATURES)]
    for j in range(N_FEATURES):
        if exempt[j]:
            mean[j], std[j] = 0.0, 1.0
        elif constant[j]:
            std[j] = 1.0
    return {"mean": mean.tolist(), "std": std.tolist(), "constant": constant, "exempt": exempt}


def normalize(features: np.ndarray, stats: dict) -> np.ndarray:
    return (features - np.asarray(stats["mean"])) / np.asarray(stats["std"])


def split_dataset(ds: Dataset, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> Dataset:
    n = len(ds.samples)
    sizes = split_sizes(n, fractions)
    if min(sizes) == 0:
        raise ValueError(f"empty split for {n} samples at fractions {fractions}: {sizes}")
    order = np.random.default_rng(seed).permutation(n)
    tags = ["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2]
    for idx, tag in zip(order, tags):
        ds.samples[idx].split = tag
    ds.norm_stats = compute_norm_stats(ds.split("train"))
    return ds


# ---------------------------------------------------------------------------
# on-disk format: samples.jsonl + dataset.json
# ---------------------------------------------------------------------------

SAMPLES_FILE = "samples.jsonl"
DATASET_FILE = "dataset.json"


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / SAMPLES_FILE, "w") as fh:
        for s in ds.samples:
            fh.write(json.dumps(s.to_dict(), separators=(",", ":")) + "\n")
    cfg = ds.config
    meta = {
        "format": "gridflow-dataset/1",
        "system": ds.base.name if ds.base is not None else "",
        "config": None if cfg is None else {**asdict(cfg), "load_range": list(cfg.load_range)},
        "topology_with_load_perturbation": True,
        "feasible_v_band": list(FEASIBLE_V),
        "feature_names": list(FEATURE_NAMES),
        "norm_stats": ds.norm_stats,
        "split_sizes": ds.split_sizes,
        "n_samples": len(ds.samples),
        "discarded": ds.discarded,
        "attempted": ds.attempted,
        "topology_perturbed": sum(s.topology_perturbed for s in ds.samples),
        "base_network": None if ds.base is None else ds.base.to_dict(),
        **ds.meta,
    }
    (d / DATASET_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    meta = json.loads((d / DATASET_FILE).read_text())
    with open(d / SAMPLES_FILE) as fh:
        samples = [GraphSample.from_dict(json.loads(line)) for line in fh if line.strip()]
    cfg = None
    if meta.get("config"):
        c = dict(meta["config"])
        c["load_range"] = tuple(c["load_range"])
        cfg = ScenarioConfig(**c)
    base = Network.from_dict(meta["base_network"]) if meta.get("base_network") else None
    return Dataset(samples, norm_stats=meta.get("norm_stats"), config=cfg, base=base,
                   discarded=meta.get("discarded", 0), attempted=meta.get("attempted", 0),
                   meta={"system": meta.get("system", "")})


def sample_network(base: Network, sample: GraphSample) -> Network:
    """Rebuild the perturbed network a sample was solved on."""
    net = base
    if sample.load_factors is not None:
        net = apply_load_factors(net, sample.load_factors)
    return apply_topology_change(net, sample.topology_change)
