"""Loss functions, Adam with L2 decay, clipping, plateau scheduling and the training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradientMap, Tape, Tensor
from .grid import AdmittanceMatrix, BusKind, Network, build_ybus
from .models import GCN, GGNN, Checkpoint, GraphBatch, Prediction, collate
from .scenarios import Dataset, GraphSample, sample_network

logger = logging.getLogger(__name__)

IMPROVEMENT = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 1e-6
    batch_size: int = 16
    max_epochs: int = 800
    patience: int = 100
    clip_norm: float = 1.0
    plateau_factor: float = 0.5
    plateau_patience: int = 25
    min_lr: float = 1e-6
    seed: int = 0
    physics_loss_weight: float = 0.0

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if not self.learning_rate > self.min_lr:
            raise ValueError("learning_rate must exceed min_lr")
        if self.patience < 1 or self.plateau_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.physics_loss_weight < 0:
            raise ValueError("physics_loss_weight must be >= 0")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mse_loss(pred: Prediction, targets: np.ndarray) -> float:
    """Per-graph loss: mean over buses of squared |V| error plus squared angle error."""
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (len(pred.v_hat), 2):
        raise ValueError(f"targets shape {targets.shape} does not match {len(pred.v_hat)} buses")
    n = len(pred.v_hat)
    return float(np.sum((pred.v_hat - targets[:, 0]) ** 2 + (pred.theta_hat - targets[:, 1]) ** 2) / n)


def batch_mse(out: Tensor, batch: GraphBatch) -> Tensor:
    return ad.mse_reduce(out, batch.targets, weights=batch.row_weights)


@dataclass(frozen=True)
class PhysicsTerms:
    """Per-graph data for the power-mismatch residual, offset into batch numbering."""

    rows: np.ndarray
    cols: np.ndarray
    g: np.ndarray
    b: np.ndarray
    p_spec: np.ndarray
    q_spec: np.ndarray
    p_rows: np.ndarray  # buses contributing a P residual
    q_rows: np.ndarray


def physics_terms(net: Network, ybus: AdmittanceMatrix | None = None, offset: int = 0) -> PhysicsTerms:
    ybus = ybus if ybus is not None else build_ybus(net)
    rows, cols, y = ybus.entries()
    p_spec, q_spec = net.specified_injections()
    p_rows = np.array([i for i, b in enumerate(net.buses) if b.kind is not BusKind.SLACK], dtype=np.int64)
    q_rows = np.array([i for i, b in enumerate(net.buses) if b.kind is BusKind.PQ], dtype=np.int64)
    return PhysicsTerms(rows + offset, cols + offset, y.real.copy(), y.imag.copy(), p_spec, q_spec,
                        p_rows + offset, q_rows + offset)


def _merge_terms(parts: list[PhysicsTerms]) -> tuple[PhysicsTerms, np.ndarray]:
    cat = lambda name: np.concatenate([getattr(t, name) for t in parts])  # noqa: E731
    merged = PhysicsTerms(*(cat(n) for n in ("rows", "cols", "g", "b", "p_spec", "q_spec", "p_rows", "q_rows")))
    # residual rows are all P rows then all Q rows, so weights follow that order
    per_graph = [1.0 / ((len(t.p_rows) + len(t.q_rows)) * len(parts)) for t in parts]
    weights = np.concatenate([np.full(len(t.p_rows), w) for t, w in zip(parts, per_graph)]
                             + [np.full(len(t.q_rows), w) for t, w in zip(parts, per_graph)])
    return merged, weights


def physics_residual(out: Tensor, terms: PhysicsTerms, weights: np.ndarray | None = None) -> Tensor:
    """Mean squared P/Q mismatch of the power-flow equations at predicted voltages."""
    tape = out.tape
    n = out.shape[0]
    v = ad.slice_(out, cols=slice(0, 1))
    th = ad.slice_(out, cols=slice(1, 2))
    vi, vk = ad.gather(v, terms.rows), ad.gather(v, terms.cols)
    dth = ad.gather(th, terms.rows) - ad.gather(th, terms.cols)
    c, s = ad.cos(dth), ad.sin(dth)
    g = tape.constant(terms.g[:, None])
    b = tape.constant(terms.b[:, None])
    vv = vi * vk
    p_terms = vv * (g * c + b * s)
    q_terms = vv * (g * s - b * c)
    k = np.arange(len(terms.rows))
    p = ad.scatter_sum(p_terms, np.column_stack([k, terms.rows]), n_out=n)
    q = ad.scatter_sum(q_terms, np.column_stack([k, terms.rows]), n_out=n)
    p_spec_full = np.zeros((n, 1))
    q_spec_full = np.zeros((n, 1))
    # specified injections are stored per graph in bus order; rows index the merged graph
    p_spec_full[:, 0] = terms.p_spec
    q_spec_full[:, 0] = terms.q_spec
    resid = ad.concat([ad.gather(p, terms.p_rows), ad.gather(q, terms.q_rows)], axis=0)
    target = np.concatenate([p_spec_full[terms.p_rows], q_spec_full[terms.q_rows]])
    return ad.mse_reduce(resid, target, weights=weights)


def physics_residual_loss(pred: Prediction, net: Network, ybus: AdmittanceMatrix | None = None) -> float:
    tape = Tape(record=False)
    out = tape.constant(pred.as_array())
    return float(physics_residual(out, physics_terms(net, ybus)).value)


# ---------------------------------------------------------------------------
# optimisation pieces
# ---------------------------------------------------------------------------


def global_norm(grads: GradientMap) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: GradientMap, clip_norm: float) -> GradientMap:
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return grads
    factor = clip_norm / norm
    return {k: g * factor for k, g in grads.items()}


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: GradientMap, state: OptimizerState, lr: float,
              weight_decay: float = 0.0) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One Adam update with classic L2 decay folded into the gradient."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = {}
    for k, w in params.items():
        g = grads[k] + weight_decay * w
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        new[k] = w - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, state


@dataclass
class PlateauScheduler:
    lr: float
    factor: float = 0.5
    patience: int = 25
    min_lr: float = 1e-6
    threshold: float = IMPROVEMENT
    best: float = math.inf
    stall: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.patience:
                self.lr = max(self.min_lr, self.lr * self.factor)
                self.stall = 0
        return self.lr


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float
    wall_time: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False
    metadata: dict = field(default_factory=dict)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.train_loss:.17g}", f"{e.val_loss:.17g}", f"{e.learning_rate:.17g}"])


def make_model(kind: str, dataset: Dataset, **model_kw):
    if kind == "ggnn":
        return GGNN(**model_kw)
    if kind == "gcn":
        n = dataset.samples[0].n_nodes
        return GCN(n_nodes=n, **model_kw)
    raise ValueError(f"unknown model kind {kind!r}")


class _PhysicsCache:
    def __init__(self, base: Network):
        self.base = base
        self._terms: dict[int, PhysicsTerms] = {}

    def terms(self, sample: GraphSample) -> PhysicsTerms:
        key = sample.scenario_id
        if key not in self._terms:
            self._terms[key] = physics_terms(sample_network(self.base, sample))
        return self._terms[key]

    def batch(self, samples: list[GraphSample]) -> tuple[PhysicsTerms, np.ndarray]:
        parts, offset = [], 0
        for s in samples:
            t = self.terms(s)
            parts.append(PhysicsTerms(t.rows + offset, t.cols + offset, t.g, t.b, t.p_spec, t.q_spec,
                                      t.p_rows + offset, t.q_rows + offset))
            offset += s.n_nodes
        return _merge_terms(parts)


def batch_loss(model, params: dict[str, Tensor], batch: GraphBatch, samples, cfg: TrainConfig,
               train: bool, rng, physics: _PhysicsCache | None) -> Tensor:
    tape = next(iter(params.values())).tape
    out = model.forward(tape, params, batch, train=train, rng=rng)
    loss = batch_mse(out, batch)
    if cfg.physics_loss_weight > 0 and physics is not None:
        terms, w = physics.batch(samples)
        loss = loss + ad.scale(physics_residual(out, terms, w), cfg.physics_loss_weight)
    return loss


def evaluate_loss(model, params: dict[str, np.ndarray], samples: list[GraphSample], norm_stats, cfg: TrainConfig,
                  physics: _PhysicsCache | None = None, batch_size: int = 64) -> float:
    """Mean per-graph loss in eval mode."""
    total = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        tape = Tape(record=False)
        loss = batch_loss(model, tape.params_from(params), collate(chunk, norm_stats), chunk, cfg,
                          False, None, physics)
        total += float(loss.value) * len(chunk)
    return total / len(samples)


def train(kind: str, dataset: Dataset, cfg: TrainConfig, model_kw: dict | None = None,
          progress=None) -> tuple[Checkpoint, TrainHistory]:
    """Train ``kind`` ("ggnn" or "gcn") and return the best-validation checkpoint."""
    model_kw = dict(model_kw or {})
    train_set, val_set = dataset.split("train"), dataset.split("val")
    if not train_set or not val_set or dataset.norm_stats is None:
        raise TrainingError("dataset needs non-empty train/val splits and normalization statistics")
    stats = dataset.norm_stats
    model = make_model(kind, dataset, **model_kw)
    target_mean = np.concatenate([s.targets for s in train_set]).mean(axis=0)
    params = model.init_params(np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])), target_mean)
    opt = OptimizerState.zeros_like(params)
    sched = PlateauScheduler(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
    physics = _PhysicsCache(dataset.base) if cfg.physics_loss_weight > 0 else None
    if physics is not None and dataset.base is None:
        raise TrainingError("physics loss needs the dataset's base network")

    hist = TrainHistory(metadata={
        "model": kind, "model_config": model.config(), "train_config": asdict(cfg),
        "dropout_placement": "readout hidden layer" if kind == "ggnn" else "none",
        "clipping": "global L2 norm", "improvement_threshold": IMPROVEMENT,
        "output_bias_init": target_mean.tolist(),
    })
    best = copy.deepcopy(params)
    t0 = time.perf_counter()
    last_gain = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch])).permutation(len(train_set))
        drop_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, epoch]))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = [train_set[i] for i in order[start:start + cfg.batch_size]]
            batch = collate(chunk, stats)
            tape = Tape()
            loss = batch_loss(model, tape.params_from(params), batch, chunk, cfg, True, drop_rng, physics)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = clip_gradients(ad.backward(tape, loss), cfg.clip_norm)
            params, opt = adam_step(params, grads, opt, lr, cfg.weight_decay)
            losses.append(value * len(chunk))
        train_loss = sum(losses) / len(train_set)
        val_loss = evaluate_loss(model, params, val_set, stats, cfg, physics)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        hist.epochs.append(EpochRecord(epoch, train_loss, val_loss, lr, time.perf_counter() - t0))
        if val_loss < hist.best_val_loss:
            if val_loss < hist.best_val_loss - IMPROVEMENT:
                last_gain = epoch
            hist.best_val_loss = val_loss
            hist.best_epoch = epoch
            best = copy.deepcopy(params)
        sched.step(val_loss)
        if progress is not None:
            progress(hist.epochs[-1])
        logger.debug("epoch %d train %.3e val %.3e lr %.2e", epoch, train_loss, val_loss, lr)
        if epoch - last_gain >= cfg.patience:
            hist.stopped_early = True
            break
    ckpt = Checkpoint(kind, model.config(), best, stats, cfg.seed,
                      meta={"best_epoch": hist.best_epoch, "best_val_loss": hist.best_val_loss})
    return ckpt, hist
