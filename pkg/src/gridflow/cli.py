"""Command-line entry point: solve, generate, train, eval, rank."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .grid import CaseParseError, NetworkValidationError, load_case
from .metrics import (CHANNELS, DEFAULT_BOUNDS, METRICS, compute_metrics, out_of_bound_rate, rank_models,
                      read_records_csv, select_channel, write_report)
from .models import Checkpoint, predict
from .powerflow import SolverOptions, nr_solve
from .scenarios import ScenarioConfig, generate_dataset, load_dataset, save_dataset, split_dataset
from .training import TrainConfig, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("gridflow")

MANIFEST = "manifest.json"
CHECKPOINT = "model.ckpt"
REFERENCE_POINTS = {
    "ieee30_ggnn_rmse": 0.0223,
    "ieee30_ggnn_mae": 0.0131,
    "ieee30_ggnn_r2_magnitude": 0.956,
    "ieee30_out_of_bound_magnitude": 0.0164,
    "ieee30_out_of_bound_angle": 0.0003,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _prepare_output(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, config: dict, seeds: dict, inputs: list[str], outputs: list[str],
                    started: float) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "config_digest": _digest(config),
        "seeds": seeds,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "tool_version": __version__,
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"missing input: {path}")
    return p


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = _require(path)
    text = p.read_text()
    if p.suffix == ".json":
        return json.loads(text)
    return tomllib.loads(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_solve(args) -> int:
    started = time.perf_counter()
    net = load_case(args.case)
    sol = nr_solve(net, SolverOptions(tolerance=args.tol, max_iterations=args.max_iter))
    body = {"case": args.case, "n_bus": net.n_bus, **sol.to_dict()}
    text = json.dumps(body, indent=2 if args.pretty else None)
    print(text)
    if args.output:
        out = _prepare_output(args.output, args.force)
        (out / "solution.json").write_text(text + "\n")
        _write_manifest(out, args, {"tol": args.tol, "max_iter": args.max_iter}, {}, [args.case],
                        ["solution.json"], started)
    return 0 if sol.converged else 1


def cmd_generate(args) -> int:
    started = time.perf_counter()
    base = load_case(args.case)
    try:
        cfg = ScenarioConfig(load_range=tuple(args.load_range), topology_fraction=args.topology_fraction,
                             samples=args.samples, seed=args.seed, tap_step=args.tap_step,
                             tap_max_steps=args.tap_max_steps)
    except ValueError as exc:
        raise UsageError(str(exc))
    out = _prepare_output(args.output, args.force)
    ds = generate_dataset(base, cfg, workers=args.workers)
    split_dataset(ds, seed=args.seed)
    save_dataset(ds, out)
    logger.info("dataset: %s", ds.split_sizes)
    config = {**asdict(cfg), "load_range": list(cfg.load_range)}
    _write_manifest(out, args, config, {"seed": args.seed, "split_seed": args.seed}, [args.case],
                    ["samples.jsonl", "dataset.json"], started)
    return 0


_MODEL_KEYS = {"hidden", "steps", "readout", "dropout", "edge_weights", "width", "head"}


def cmd_train(args) -> int:
    started = time.perf_counter()
    _require(args.dataset)
    raw = _load_config(args.config)
    model_kw = dict(raw.pop("model", {}))
    if args.edge_weights:
        model_kw["edge_weights"] = True
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.max_epochs is not None:
        raw["max_epochs"] = args.max_epochs
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown or set(model_kw) - _MODEL_KEYS:
        raise UsageError(f"unknown config keys: {sorted(unknown | (set(model_kw) - _MODEL_KEYS))}")
    try:
        cfg = TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}")
    out = _prepare_output(args.output, args.force)
    ds = load_dataset(args.dataset)
    ckpt, hist = train(args.model, ds, cfg, model_kw)
    ckpt.save(out / CHECKPOINT)
    hist.write_csv(out / "history.csv")
    summary = {
        "model": args.model,
        "model_config": ckpt.model_config,
        "train_config": asdict(cfg),
        "best_epoch": hist.best_epoch,
        "best_val_loss": hist.best_val_loss,
        "epochs_run": len(hist.epochs),
        "stopped_early": hist.stopped_early,
        "metadata": hist.metadata,
        "wall_time_s": hist.epochs[-1].wall_time if hist.epochs else 0.0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, args, {"train": asdict(cfg), "model": model_kw}, {"seed": cfg.seed},
                    [args.dataset] + ([args.config] if args.config else []),
                    [CHECKPOINT, "history.csv", "summary.json"], started)
    return 0


def evaluate(ckpt: Checkpoint, ds, split: str = "test", model_id: str | None = None, bounds=None):
    """Metric records, scatter rows and summary for one checkpoint on one split."""
    samples = ds.split(split)
    if not samples:
        raise ValueError(f"dataset has no {split!r} samples")
    preds = predict(ckpt.model(), ckpt.params, samples, ds.norm_stats)
    P = np.stack([p.as_array() for p in preds])
    T = np.stack([s.targets for s in samples])
    model_id = model_id or ckpt.arch
    system = ds.meta.get("system", "") or (ds.base.name if ds.base is not None else "")
    records = [compute_metrics(select_channel(P, ch), select_channel(T, ch), ch, model_id, system)
               for ch in CHANNELS]
    bounds = bounds or DEFAULT_BOUNDS
    oob = {ch: out_of_bound_rate(select_channel(P, ch), bounds[ch]) for ch in ("magnitude", "angle")}
    labels = [b.label for b in ds.base.buses] if ds.base is not None else list(range(P.shape[1]))

    def scatter():
        for s, p in zip(samples, P):
            for ci, ch in enumerate(("magnitude", "angle")):
                for i in range(p.shape[0]):
                    yield labels[i], s.scenario_id, ch, s.targets[i, ci], p[i, ci]

    summary = {
        "model": model_id,
        "system": system,
        "split": split,
        "n_samples": len(samples),
        "out_of_bound_rate": oob,
        "bounds": {k: list(v) for k, v in bounds.items()},
        "reference_points": REFERENCE_POINTS,
    }
    return records, scatter(), summary


def cmd_eval(args) -> int:
    started = time.perf_counter()
    _require(args.checkpoint)
    _require(args.dataset)
    out = _prepare_output(args.output, args.force)
    ckpt = Checkpoint.load(args.checkpoint)
    ds = load_dataset(args.dataset)
    if ckpt.norm_stats != ds.norm_stats:
        raise ValueError("checkpoint was trained with different normalization statistics")
    bounds = {"magnitude": tuple(args.v_bounds), "angle": tuple(args.angle_bounds)}
    records, scatter, summary = evaluate(ckpt, ds, args.split, args.model_id, bounds)
    write_report(records, None, out, summary, scatter)
    _write_manifest(out, args, {"split": args.split, "bounds": summary["bounds"]}, {"seed": ckpt.seed},
                    [args.checkpoint, args.dataset],
                    ["metrics.csv", "ranks.csv", "rank_totals.csv", "scatter.csv", "summary.json"], started)
    return 0


def cmd_rank(args) -> int:
    started = time.perf_counter()
    records = []
    for d in args.eval_dirs:
        records += read_records_csv(_require(str(Path(d) / "metrics.csv")))
    metrics = args.metrics.split(",")
    if set(metrics) - set(METRICS):
        raise UsageError(f"unknown metrics: {sorted(set(metrics) - set(METRICS))}")
    table = {}
    for r in records:
        if r.channel != args.channel:
            continue
        for m in metrics:
            key = (r.model, r.system, m)
            if key in table:
                raise ValueError(f"duplicate result for model={r.model} system={r.system}")
            table[key] = getattr(r, m)
    out = _prepare_output(args.output, args.force)
    ranks = rank_models(table)
    write_report(records, ranks, out, {"channel": args.channel, "metrics": metrics})
    _write_manifest(out, args, {"channel": args.channel, "metrics": metrics}, {}, list(args.eval_dirs),
                    ["metrics.csv", "ranks.csv", "rank_totals.csv", "summary.json"], started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridflow", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="Newton-Raphson power flow of a case")
    s.add_argument("case", help="MATPOWER case file or bundled case name (ieee30, ieee118)")
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=50)
    s.add_argument("--json", action="store_true", help="JSON output (the default)")
    s.add_argument("--pretty", action="store_true")
    s.add_argument("-o", "--output")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_solve)

    g = sub.add_parser("generate", help="generate a solved scenario dataset")
    g.add_argument("case")
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--load-range", type=float, nargs=2, default=(-0.4, 0.4), metavar=("LOW", "HIGH"))
    g.add_argument("--topology-fraction", type=float, default=0.05)
    g.add_argument("--tap-step", type=float, default=0.0125)
    g.add_argument("--tap-max-steps", type=int, default=2)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a surrogate on a dataset")
    t.add_argument("dataset")
    t.add_argument("--model", choices=("ggnn", "gcn"), required=True)
    t.add_argument("--config", help="TOML or JSON file with TrainConfig keys and an optional [model] table")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--edge-weights", action="store_true", help="scale GGNN messages by |Y_ij|")
    t.add_argument("-o", "--output", required=True)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--model-id")
    e.add_argument("--v-bounds", type=float, nargs=2, default=DEFAULT_BOUNDS["magnitude"])
    e.add_argument("--angle-bounds", type=float, nargs=2, default=DEFAULT_BOUNDS["angle"])
    e.add_argument("-o", "--output", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rank", help="rank models across evaluation directories")
    r.add_argument("eval_dirs", nargs="+")
    r.add_argument("--channel", default="combined", choices=CHANNELS)
    r.add_argument("--metrics", default="mse,rmse,mae,r_squared")
    r.add_argument("-o", "--output", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_rank)
    return p


def _one_line(msg: str) -> str:
    return " ".join(str(msg).split())


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("GRIDFLOW_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"gridflow: usage-error: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CaseParseError, NetworkValidationError) as exc:
        # missing or malformed inputs are usage errors
        print(f"gridflow: usage-error: {_one_line(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"gridflow: error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
