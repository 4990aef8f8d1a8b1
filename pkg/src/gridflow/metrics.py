"""Regression metrics, out-of-bound rates, rank aggregation and CSV/JSON reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

CHANNELS = ("magnitude", "angle", "combined")
METRICS = ("mse", "rmse", "mae", "nrmse", "r_squared")
HIGHER_IS_BETTER = {"r_squared"}
DEFAULT_BOUNDS = {"magnitude": (0.94, 1.06), "angle": (-0.6, 0.6)}

UNDEFINED = math.nan


@dataclass
class MetricsRecord:
    mse: float
    rmse: float
    mae: float
    nrmse: float
    r_squared: float
    channel: str = "combined"
    model: str = ""
    system: str = ""
    n_points: int = 0


def select_channel(values: np.ndarray, channel: str) -> np.ndarray:
    """Flatten (..., 2) arrays of (|V|, theta) to the requested channel."""
    values = np.asarray(values, dtype=float)
    if channel == "magnitude":
        return values[..., 0].ravel()
    if channel == "angle":
        return values[..., 1].ravel()
    if channel == "combined":
        return np.concatenate([values[..., 0].ravel(), values[..., 1].ravel()])
    raise ValueError(f"unknown channel {channel!r}")


def compute_metrics(predictions, targets, channel: str = "combined", model: str = "",
                    system: str = "") -> MetricsRecord:
    """The five metrics over 1-D prediction/target vectors.

    NRMSE and R^2 come back as NaN when the target range or variance is zero.
    """
    y_hat = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    if y_hat.shape != y.shape or y.size < 2:
        raise ValueError("predictions and targets need equal lengths >= 2")
    err = y_hat - y
    mse = float(np.mean(err * err))
    rmse = math.sqrt(mse)
    mae = float(np.mean(np.abs(err)))
    span = float(y.max() - y.min())
    nrmse = rmse / span if span > 0 else UNDEFINED
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err * err)) / ss_tot if ss_tot > 0 else UNDEFINED
    return MetricsRecord(mse, rmse, mae, nrmse, r2, channel, model, system, int(y.size))


def out_of_bound_rate(predictions, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    if not lo < hi:
        raise ValueError("bounds must satisfy low < high")
    p = np.asarray(predictions, dtype=float).ravel()
    if p.size == 0:
        return 0.0
    return float(np.mean((p < lo) | (p > hi)))


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------


@dataclass
class RankTable:
    ranks: dict[tuple[str, str, str], float]
    totals: dict[str, float]
    averages: dict[str, float]
    columns: list[tuple[str, str]] = field(default_factory=list)

    @property
    def models(self) -> list[str]:
        return sorted(self.totals)


def rank_models(table: dict[tuple[str, str, str], float]) -> RankTable:
    """Rank models within every (system, metric) column; ties share the mean rank."""
    models = sorted({k[0] for k in table})
    columns = sorted({(k[1], k[2]) for k in table})
    ranks: dict[tuple[str, str, str], float] = {}
    for system, metric in columns:
        values = []
        for m in models:
            key = (m, system, metric)
            if key not in table:
                raise KeyError(f"missing cell: model={m} system={system} metric={metric}")
            v = float(table[key])
            if math.isnan(v):
                raise ValueError(f"undefined value in cell: model={m} system={system} metric={metric}")
            values.append(-v if metric in HIGHER_IS_BETTER else v)
        for m, r in zip(models, rankdata(values, method="average")):
            ranks[(m, system, metric)] = float(r)
    totals = {m: sum(ranks[(m, s, k)] for s, k in columns) for m in models}
    averages = {m: totals[m] / len(columns) if columns else 0.0 for m in models}
    return RankTable(ranks, totals, averages, columns)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

RECORD_FIELDS = ("model", "system", "channel", "n_points") + METRICS
SCATTER_FIELDS = ("bus_id", "sample_id", "channel", "actual", "predicted", "abs_error")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_records_csv(records: list[MetricsRecord], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            d = asdict(r)
            w.writerow([_fmt(d[f]) for f in RECORD_FIELDS])


def read_records_csv(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricsRecord(**{m: float(r[m]) for m in METRICS}, channel=r["channel"], model=r["model"],
                      system=r["system"], n_points=int(r["n_points"]))
        for r in rows
    ]


def write_scatter_csv(rows, path: Path) -> None:
    """``rows`` yields (bus_id, sample_id, channel, actual, predicted)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCATTER_FIELDS)
        for bus, sample, channel, actual, pred in rows:
            w.writerow([bus, sample, channel, _fmt(float(actual)), _fmt(float(pred)),
                        _fmt(abs(float(pred) - float(actual)))])


def write_report(records: list[MetricsRecord], ranks: RankTable | None, destination: str | Path,
                 summary: dict | None = None, scatter=None) -> list[Path]:
    """Write metrics.csv, ranks.csv, rank_totals.csv, summary.json and optional scatter.csv."""
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    written = [dest / "metrics.csv"]
    write_records_csv(records, written[0])
    ranks_path = dest / "ranks.csv"
    totals_path = dest / "rank_totals.csv"
    with open(ranks_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "system", "metric", "rank"])
        if ranks is not None:
            for (m, s, k), r in sorted(ranks.ranks.items()):
                w.writerow([m, s, k, _fmt(r)])
    with open(totals_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "total_rank", "average_rank"])
        if ranks is not None:
            for m in sorted(ranks.totals, key=lambda m: (ranks.totals[m], m)):
                w.writerow([m, _fmt(ranks.totals[m]), _fmt(ranks.averages[m])])
    written += [ranks_path, totals_path]
    if scatter is not None:
        write_scatter_csv(scatter, dest / "scatter.csv")
        written.append(dest / "scatter.csv")
    body = dict(summary or {})
    body["n_records"] = len(records)
    if ranks is not None:
        body["total_rank"] = ranks.totals
        body["average_rank"] = ranks.averages
    (dest / "summary.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n")
    written.append(dest / "summary.json")
    return written


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")
