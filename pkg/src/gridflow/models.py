"""GGNN surrogate and the two-layer GCN baseline, written on the autodiff tape."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .scenarios import N_FEATURES, GraphSample, normalize


class ModelError(ValueError):
    pass


@dataclass
class Prediction:
    v_hat: np.ndarray
    theta_hat: np.ndarray

    @classmethod
    def from_array(cls, out: np.ndarray) -> "Prediction":
        return cls(out[:, 0].copy(), out[:, 1].copy())

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.v_hat, self.theta_hat])


@dataclass
class GraphBatch:
    """Several graphs merged into one disconnected graph."""

    x: np.ndarray  # normalized features, (n, d)
    edges: np.ndarray  # (E, 2) with offsets applied
    sizes: list[int]
    targets: np.ndarray | None = None
    edge_weight: np.ndarray | None = None
    _adj: sp.csr_matrix | None = None

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def adjacency(self) -> sp.csr_matrix:
        if self._adj is None:
            self._adj = ad.scatter_matrix(self.edges, self.n_nodes, self.n_nodes, self.edge_weight)
        return self._adj

    @property
    def row_weights(self) -> np.ndarray:
        """Weights turning a row-summed squared error into the mean per-graph loss."""
        return np.concatenate([np.full(n, 1.0 / (n * len(self.sizes))) for n in self.sizes])


def collate(samples: list[GraphSample], norm_stats: dict | None = None) -> GraphBatch:
    xs, es, ts, ws, sizes = [], [], [], [], []
    offset = 0
    for s in samples:
        x = s.node_features if norm_stats is None else normalize(s.node_features, norm_stats)
        xs.append(x)
        es.append(s.edge_list + offset)
        ts.append(s.targets)
        if s.edge_features is not None:
            ws.append(s.edge_features[:, 0])
        sizes.append(s.n_nodes)
        offset += s.n_nodes
    edge_weight = np.concatenate(ws) if len(ws) == len(samples) and ws else None
    return GraphBatch(np.concatenate(xs), np.concatenate(es).reshape(-1, 2), sizes,
                      np.concatenate(ts), edge_weight)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# GGNN building blocks
# ---------------------------------------------------------------------------


def ggnn_init_hidden(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    if x.shape[1] != p["W_in"].shape[0]:
        raise ModelError(f"feature width {x.shape[1]} does not match W_in {p['W_in'].shape}")
    return ad.tanh(x @ p["W_in"] + p["b_in"])


def aggregate_messages(h: Tensor, edges, W_m: Tensor, weights=None) -> Tensor:
    """m_i = sum over in-neighbours j of W_m h_j (row form: (A h) W_m)."""
    return ad.scatter_sum(h, edges, h.shape[0], weights) @ W_m


def gru_update(m: Tensor, h: Tensor, p: dict[str, Tensor], gates: dict | None = None) -> Tensor:
    z = ad.sigmoid(m @ p["W_z"] + h @ p["U_z"] + p["b_z"])
    r = ad.sigmoid(m @ p["W_r"] + h @ p["U_r"] + p["b_r"])
    cand = ad.tanh(m @ p["W_h"] + (r * h) @ p["U_h"] + p["b_h"])
    if gates is not None:
        gates.update(z=z.value, r=r.value, cand=cand.value)
    return z * h + (1.0 - z) * cand


class GGNN:
    """Gated graph network: tanh input projection, T shared GRU rounds, per-node MLP readout."""

    arch = "ggnn"

    def __init__(self, d: int = N_FEATURES, hidden: int = 32, steps: int = 8, readout: int = 64,
                 dropout: float = 0.1, edge_weights: bool = False):
        if steps < 1:
            raise ModelError("GGNN needs at least one propagation step")
        self.d, self.hidden, self.steps, self.readout = d, hidden, steps, readout
        self.dropout = dropout
        self.edge_weights = edge_weights

    def config(self) -> dict:
        return {"d": self.d, "hidden": self.hidden, "steps": self.steps, "readout": self.readout,
                "dropout": self.dropout, "edge_weights": self.edge_weights}

    def init_params(self, rng: np.random.Generator, target_mean=(0.0, 0.0)) -> dict[str, np.ndarray]:
        H = self.hidden
        p = {"W_in": glorot(rng, self.d, H), "b_in": np.zeros(H), "W_m": glorot(rng, H, H)}
        for gate in ("z", "r", "h"):
            p[f"W_{gate}"] = glorot(rng, H, H)
            p[f"U_{gate}"] = glorot(rng, H, H)
            p[f"b_{gate}"] = np.ones(H) if gate == "z" else np.zeros(H)
        p["W_o1"] = glorot(rng, H, self.readout)
        p["b_o1"] = np.zeros(self.readout)
        p["W_o2"] = glorot(rng, self.readout, 2)
        p["b_o2"] = np.asarray(target_mean, dtype=float).copy()
        return p

    def forward(self, tape: Tape, p: dict[str, Tensor], batch: GraphBatch, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        x = tape.constant(batch.x)
        h = ggnn_init_hidden(x, p)
        adj = batch.adjacency if self.edge_weights else ad.scatter_matrix(batch.edges, batch.n_nodes, batch.n_nodes)
        for _ in range(self.steps):
            m = aggregate_messages(h, adj, p["W_m"])
            h = gru_update(m, h, p)
        z = ad.tanh(h @ p["W_o1"] + p["b_o1"])
        if train and self.dropout > 0:
            z = ad.dropout(z, self.dropout, rng)
        return z @ p["W_o2"] + p["b_o2"]


class GCN:
    """Two first-order graph convolutions, flattened into a dense head bound to one graph size."""

    arch = "gcn"

    def __init__(self, n_nodes: int, d: int = N_FEATURES, width: int = 12, head: int = 128):
        self.n_nodes, self.d, self.width, self.head = n_nodes, d, width, head

    def config(self) -> dict:
        return {"n_nodes": self.n_nodes, "d": self.d, "width": self.width, "head": self.head}

    def init_params(self, rng: np.random.Generator, target_mean=(0.0, 0.0)) -> dict[str, np.ndarray]:
        n, w = self.n_nodes, self.width
        return {
            "W0_self": glorot(rng, self.d, w),
            "W0_nbr": glorot(rng, self.d, w),
            "W1_self": glorot(rng, w, w),
            "W1_nbr": glorot(rng, w, w),
            "W_d1": glorot(rng, n * w, self.head),
            "b_d1": np.zeros(self.head),
            "W_d2": glorot(rng, self.head, 2 * n),
            "b_d2": np.tile(np.asarray(target_mean, dtype=float), n),
        }

    def forward(self, tape: Tape, p: dict[str, Tensor], batch: GraphBatch, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        if any(n != self.n_nodes for n in batch.sizes):
            raise ModelError(f"GCN head is built for {self.n_nodes} nodes, got graphs of size {sorted(set(batch.sizes))}")
        adj = ad.scatter_matrix(batch.edges, batch.n_nodes, batch.n_nodes)
        h = tape.constant(batch.x)
        for layer in ("W0", "W1"):
            h = ad.relu(h @ p[f"{layer}_self"] + ad.scatter_sum(h, adj) @ p[f"{layer}_nbr"])
        flat = ad.reshape(h, (len(batch.sizes), self.n_nodes * self.width))
        hidden = ad.relu(flat @ p["W_d1"] + p["b_d1"])
        out = hidden @ p["W_d2"] + p["b_d2"]
        # output layout per graph is [V1, th1, V2, th2, ...]
        return ad.reshape(out, (batch.n_nodes, 2))


def build_model(arch: str, **kw):
    if arch == "ggnn":
        return GGNN(**kw)
    if arch == "gcn":
        return GCN(**kw)
    raise ModelError(f"unknown architecture {arch!r}")


def predict(model, params: dict[str, np.ndarray], samples: list[GraphSample], norm_stats: dict | None,
            batch_size: int = 64) -> list[Prediction]:
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = collate(chunk, norm_stats)
        tape = Tape(record=False)
        y = model.forward(tape, tape.params_from(params), batch, train=False).value
        offset = 0
        for n in batch.sizes:
            out.append(Prediction.from_array(y[offset:offset + n]))
            offset += n
    return out


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then float64 little-endian parameters
# ---------------------------------------------------------------------------


def stats_digest(norm_stats: dict | None) -> str:
    return hashlib.sha256(json.dumps(norm_stats, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    arch: str
    model_config: dict
    params: dict[str, np.ndarray]
    norm_stats: dict | None = None
    seed: int = 0
    meta: dict | None = None

    def model(self):
        return build_model(self.arch, **self.model_config)

    def save(self, path: str | Path) -> None:
        header = {
            "format": "gridflow-checkpoint/1",
            "architecture": self.arch,
            "model": self.model_config,
            "T": self.model_config.get("steps"),
            "H": self.model_config.get("hidden"),
            "d": self.model_config.get("d"),
            "seed": self.seed,
            "norm_stats": self.norm_stats,
            "norm_stats_digest": stats_digest(self.norm_stats),
            "params": [[k, list(v.shape)] for k, v in self.params.items()],
            "meta": self.meta or {},
        }
        blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.params.values())
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(blob)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        head, _, blob = raw.partition(b"\n")
        header = json.loads(head)
        if header.get("format") != "gridflow-checkpoint/1":
            raise ModelError(f"{path}: not a gridflow checkpoint")
        if stats_digest(header["norm_stats"]) != header["norm_stats_digest"]:
            raise ModelError(f"{path}: normalization statistics digest mismatch")
        params, offset = {}, 0
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
            offset += 8 * count
        if offset != len(blob):
            raise ModelError(f"{path}: parameter block has {len(blob) - offset} trailing bytes")
        return cls(header["architecture"], header["model"], params, header["norm_stats"],
                   header["seed"], header.get("meta"))
