"""Seasonal-naive-normalized MASE / CRPS scoring with geometric-mean aggregation."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datapipe import record_to_series, resolve_path, series_to_record
from .decoding import QuantileForecast, forecast
from .model import DEFAULT_LEVELS, Model
from .series import Series

logger = logging.getLogger(__name__)

REPORT_FIELDS = ["task_id", "mase", "crps", "baseline_mase", "baseline_crps", "normalized_mase", "normalized_crps"]

Forecaster = Callable[[Series, int], QuantileForecast]


class BaselineError(ValueError):
    pass


class UndefinedMaseError(ValueError):
    pass


class AggregationError(ValueError):
    pass


def seasonal_naive(context: Series, horizon: int,
                   levels: Sequence[float] = DEFAULT_LEVELS) -> tuple[np.ndarray, QuantileForecast]:
    """Repeat the last observed season: ``y[c + h] = y[c + h - s * ceil(h / s)]``."""
    s = context.season_length
    c = len(context)
    if c < s:
        raise BaselineError(f"context of {c} points is shorter than one season ({s})")
    h = np.arange(1, horizon + 1)
    point = context.values[c + h - s * np.ceil(h / s).astype(int) - 1]
    return point, QuantileForecast(tuple(levels), np.repeat(point[:, None], len(levels), axis=1))


def mase(targets, point_forecast, context, season_length: int) -> float:
    """Mean absolute error scaled by the in-sample seasonal-difference error."""
    y = np.asarray(context, dtype=np.float64)
    scale = np.nanmean(np.abs(y[season_length:] - y[:-season_length])) if y.size > season_length else np.nan
    if not scale > 0:
        raise UndefinedMaseError(f"seasonal-difference scale is {scale}")
    err = np.abs(np.asarray(targets, dtype=np.float64) - np.asarray(point_forecast, dtype=np.float64))
    return float(np.nanmean(err) / scale)


def crps_from_quantiles(targets, qf: QuantileForecast) -> float:
    """Mean over time of ``(2 / |Q|) * sum_q pinball_q``, the discrete-quantile CRPS."""
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] != qf.horizon:
        raise ValueError(f"{y.shape[0]} targets for a {qf.horizon}-step forecast")
    q = np.asarray(qf.levels, dtype=np.float64)[None, :]
    d = y - qf.values
    loss = np.where(d >= 0, q * d, (q - 1.0) * d)
    per_step = 2.0 * loss.sum(axis=1) / q.size
    return float(np.nanmean(per_step))


@dataclass
class EvalRecord:
    task_id: str
    mase: float
    crps: float
    baseline_mase: float
    baseline_crps: float

    @property
    def normalized_mase(self) -> float:
        return self.mase / self.baseline_mase

    @property
    def normalized_crps(self) -> float:
        return self.crps / self.baseline_crps

    def row(self) -> list:
        return [self.task_id, self.mase, self.crps, self.baseline_mase, self.baseline_crps,
                self.normalized_mase, self.normalized_crps]


def geometric_mean(xs: Sequence[float]) -> float:
    xs = list(xs)
    if not xs or any(not x > 0 for x in xs):
        raise AggregationError(f"geometric mean needs positive scores, got {xs}")
    return math.exp(math.fsum(math.log(x) for x in xs) / len(xs))


def aggregate(records: Sequence[EvalRecord]) -> dict[str, float]:
    return {
        "agg_mase": geometric_mean(r.normalized_mase for r in records),
        "agg_crps": geometric_mean(r.normalized_crps for r in records),
    }


@dataclass
class EvalTask:
    task_id: str
    context: Series
    targets: np.ndarray


def split_task(series: Series, horizon: int) -> EvalTask:
    if horizon >= len(series):
        raise ValueError(f"series {series.id!r} too short for horizon {horizon}")
    return EvalTask(series.id, series.slice(0, len(series) - horizon), series.values[-horizon:].copy())


def load_tasks(path: str | Path, default_horizon: int | None = None) -> list[EvalTask]:
    """Read tasks: dataset records with a ``horizon`` field; the last ``horizon`` values are targets."""
    tasks = []
    with open(resolve_path(path), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                tasks.append(split_task(record_to_series(rec), int(rec.get("horizon", default_horizon))))
    return tasks


def write_tasks(path: str | Path, series: Sequence[Series], horizon: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in series:
            fh.write(json.dumps(series_to_record(s) | {"horizon": horizon}) + "\n")


def on_levels(qf: QuantileForecast, levels: Sequence[float]) -> QuantileForecast:
    """Re-express a forecast on ``levels`` (a single-level forecast is held constant)."""
    if tuple(qf.levels) == tuple(levels):
        return qf
    return QuantileForecast(tuple(levels), np.stack([qf.quantile(q) for q in levels], axis=1))


def model_forecaster(model: Model, mode: str = "arq", use_cache: bool = True) -> Forecaster:
    return lambda ctx, h: forecast(ctx, model, h, mode, use_cache)


def seasonal_naive_forecaster(levels: Sequence[float] = DEFAULT_LEVELS) -> Forecaster:
    return lambda ctx, h: seasonal_naive(ctx, h, levels)[1]


def score_task(forecaster: Forecaster, task: EvalTask, levels: Sequence[float] = DEFAULT_LEVELS) -> EvalRecord:
    h = task.targets.shape[0]
    ctx = task.context
    qf = on_levels(forecaster(ctx, h), levels)
    naive_point, naive_qf = seasonal_naive(ctx, h, levels)
    rec = EvalRecord(
        task.task_id,
        mase(task.targets, qf.median(), ctx.values, ctx.season_length),
        crps_from_quantiles(task.targets, qf),
        mase(task.targets, naive_point, ctx.values, ctx.season_length),
        crps_from_quantiles(task.targets, naive_qf),
    )
    if not (rec.baseline_mase > 0 and rec.baseline_crps > 0):
        raise BaselineError(f"task {task.task_id!r}: seasonal-naive score is zero")
    return rec


def run_eval(forecaster: Forecaster | Model, tasks: Sequence[EvalTask], out_path: str | Path | None = None,
             levels: Sequence[float] = DEFAULT_LEVELS, skipped: list | None = None) -> list[EvalRecord]:
    """Score every task against the seasonal-naive baseline and write the CSV report.

    A task that fails is logged and appended to ``skipped`` as
    ``(task_id, message)`` rather than aborting the run.
    """
    if isinstance(forecaster, Model):
        forecaster = model_forecaster(forecaster)
    records = []
    for task in sorted(tasks, key=lambda t: t.task_id):
        try:
            records.append(score_task(forecaster, task, levels))
        except (ValueError, RuntimeError) as exc:
            logger.warning("skipping task %s: %s", task.task_id, exc)
            if skipped is not None:
                skipped.append((task.task_id, str(exc)))
    if out_path is not None:
        write_report(out_path, records)
    return records


def write_report(path: str | Path, records: Sequence[EvalRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])
        if records:
            agg = aggregate(records)
            w.writerow(["aggregate", "", "", "", "", repr(agg["agg_mase"]), repr(agg["agg_crps"])])
        else:
            w.writerow(["aggregate", "", "", "", "", "", ""])
