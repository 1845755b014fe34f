"""Corpus I/O, anomaly filtering and training-sample construction.

Corpus files hold one JSON object per line::

    {"id": "s0", "freq": "H", "season_length": 24, "values": [1.5, null, 2.0]}

``null`` marks a missing observation. Floats are written with Python's
shortest round-trip repr, so write -> load is bit-exact.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, NormStats, compute_norm_stats, input_features, patchify
from .series import Series

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "MOIRAI_DATA_DIR"
MAX_MALFORMED_FRACTION = 0.10
ZSCORE_THRESHOLD = 5.0
ZSCORE_CAP = 0.01


class CorpusQualityError(ValueError):
    pass


class InsufficientLengthError(ValueError):
    pass


@dataclass
class CorpusReport:
    n_ok: int = 0
    n_malformed: int = 0

    @property
    def malformed_fraction(self) -> float:
        total = self.n_ok + self.n_malformed
        return self.n_malformed / total if total else 0.0


def resolve_path(path: str | os.PathLike) -> Path:
    """Relative paths that do not exist are looked up under ``$MOIRAI_DATA_DIR``."""
    p = Path(path)
    root = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and not p.exists() and root:
        return Path(root) / p
    return p


def series_to_record(s: Series) -> dict:
    vals = [None if m else float(v) for v, m in zip(s.values.tolist(), s.missing.tolist())]
    return {"id": s.id, "freq": s.freq, "season_length": int(s.season_length), "values": vals}


def record_to_series(rec: dict) -> Series:
    if not isinstance(rec, dict) or not isinstance(rec.get("id"), str):
        raise ValueError("record is not an object with a string id")
    raw = rec["values"]
    if not isinstance(raw, list) or any(
        v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))) for v in raw
    ):
        raise ValueError("values must be a list of numbers or null")
    values = np.array([np.nan if v is None else float(v) for v in raw], dtype=np.float64)
    return Series(
        id=rec["id"],
        values=values,
        freq=str(rec.get("freq", "H")),
        season_length=rec.get("season_length"),
    )


def write_corpus(path: str | os.PathLike, series: Iterable[Series], extra: dict | None = None) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in series:
            rec = series_to_record(s)
            if extra:
                rec |= extra
            fh.write(json.dumps(rec, allow_nan=False) + "\n")
            n += 1
    return n


def load_corpus(path: str | os.PathLike, report: CorpusReport | None = None) -> Iterator[Series]:
    """Stream series from a corpus file, skipping (and counting) malformed lines.

    Raises :class:`CorpusQualityError` once the stream is exhausted if more
    than 10% of the records were malformed.
    """
    report = report if report is not None else CorpusReport()
    with open(resolve_path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                s = record_to_series(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                report.n_malformed += 1
                logger.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)
                continue
            report.n_ok += 1
            yield s
    if report.malformed_fraction > MAX_MALFORMED_FRACTION:
        raise CorpusQualityError(
            f"{path}: {report.n_malformed} of {report.n_ok + report.n_malformed} records malformed"
        )


def zscore_filter(series: Series, threshold: float = ZSCORE_THRESHOLD, cap: float = ZSCORE_CAP) -> bool:
    """Keep a series unless its last 70% drifts from the first 30%.

    A series is kept iff the fraction of observed suffix points whose z-score
    under the prefix statistics exceeds ``threshold`` is strictly below ``cap``.
    """
    norm = compute_norm_stats(series)
    start = int(math.floor(norm.source_fraction * len(series)))
    suffix = series.values[start:][~series.missing[start:]]
    if suffix.size == 0:
        return True
    frac = np.count_nonzero(np.abs(norm.normalize(suffix)) > threshold) / suffix.size
    return bool(frac < cap)


@dataclass(frozen=True)
class TrainSample:
    """Masked input features plus the unmasked normalized target sequence.

    ``target``/``target_mask`` are flat over the (left-padded) patch grid, so
    position ``t`` is trained against ``target[(t+1)*p : (t+1+n_token)*p]``.
    """

    context_patches: np.ndarray
    target: np.ndarray
    target_mask: np.ndarray
    norm: NormStats
    masked_patches: np.ndarray


def make_sample(
    series: Series,
    cfg: ModelConfig,
    mask_rate: float,
    rng: np.random.Generator,
    exclude_norm_prefix: bool = True,
) -> TrainSample:
    """Patchify with prefix statistics and randomly blank whole input patches.

    ``floor(mask_rate * T)`` distinct patches get zero values and zero
    indicators. Targets keep the original values; with ``exclude_norm_prefix``
    the points used for the statistics are also excluded from the loss.
    """
    p = cfg.p_in
    if len(series) < 2 * p:
        raise InsufficientLengthError(f"series {series.id!r} has {len(series)} points, need >= {2 * p}")
    norm = compute_norm_stats(series)
    vals, obs = patchify(series, p, norm)
    t = vals.shape[0]
    target = vals.reshape(-1).copy()
    target_mask = obs.reshape(-1).copy()
    if exclude_norm_prefix:
        pad = t * p - len(series)
        target_mask[: pad + int(math.floor(norm.source_fraction * len(series)))] = 0.0
    masked = np.sort(rng.choice(t, size=int(math.floor(mask_rate * t)), replace=False))
    vals[masked] = 0.0
    obs[masked] = 0.0
    return TrainSample(input_features(vals, obs), target, target_mask, norm, masked)


def sample_window(series: Series, length: int, rng: np.random.Generator) -> Series:
    if len(series) <= length:
        return series
    start = int(rng.integers(0, len(series) - length + 1))
    return series.slice(start, start + length)
