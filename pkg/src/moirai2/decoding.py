"""Quantile forecasting: direct first step, then autoregressive
multi-quantile decoding (expand every quantile path, pool, re-quantile).

All decoding happens in normalized space; the full context supplies the
normalization statistics and results are denormalized at the end.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .model import KVCache, Model, NormStats, compute_norm_stats, input_features, patchify
from .series import Series


class InsufficientContextError(ValueError):
    pass


class CacheMismatchError(RuntimeError):
    """Cached and uncached decoding disagree beyond tolerance."""


@dataclass
class QuantileForecast:
    levels: tuple[float, ...]
    values: np.ndarray  # [H, n_q], original units

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    def quantile(self, q: float) -> np.ndarray:
        """Per-step value at level ``q`` (linear in level between stored quantiles)."""
        lv = np.asarray(self.levels)
        if lv.size == 1:
            return self.values[:, 0].copy()
        return np.array([np.interp(q, lv, row) for row in self.values])

    def median(self) -> np.ndarray:
        return self.quantile(0.5)


def empirical_quantiles(pool: np.ndarray, levels) -> np.ndarray:
    """Row-wise empirical quantiles, linearly interpolating order statistics.

    ``pool`` is ``[N, S]``; level ``q`` sits at fractional rank ``(S - 1) * q``.
    Returns float64 ``[N, len(levels)]``.
    """
    s = np.sort(np.asarray(pool, dtype=np.float64), axis=1)
    n = s.shape[1]
    h = (n - 1) * np.asarray(levels, dtype=np.float64)
    lo = np.floor(h).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = h - lo
    return s[:, lo] + frac * (s[:, hi] - s[:, lo])


def _context_features(context: Series, model: Model) -> tuple[np.ndarray, NormStats]:
    if len(context) == 0 or context.missing.all():
        raise InsufficientContextError(f"context {context.id!r} has no observed values")
    norm = compute_norm_stats(context, source_fraction=1.0)
    vals, obs = patchify(context, model.config.p_in, norm)
    return input_features(vals, obs), norm


def _chunk(head_last: np.ndarray, n_patches: int) -> np.ndarray:
    """``[..., n_token, n_q, p]`` -> ``[..., n_patches * p, n_q]``."""
    x = head_last[..., :n_patches, :, :]
    x = np.swapaxes(x, -1, -2)
    return x.reshape(*x.shape[:-3], n_patches * x.shape[-2], x.shape[-1])


def _as_features(paths: np.ndarray, p: int) -> np.ndarray:
    """Observed value paths ``[B, L]`` (L a multiple of p) -> features ``[B, L/p, 2p]``."""
    b, n = paths.shape
    vals = paths.reshape(b, n // p, p).astype(np.float32)
    return input_features(vals, np.ones_like(vals))


def predict_first(context: Series, model: Model, h_patches: int,
                  cache: KVCache | None = None) -> tuple[np.ndarray, NormStats]:
    """Quantiles for the first ``h_patches`` patches from a single forward pass.

    Returns normalized values ``[h_patches * p_out, n_q]`` sorted along the
    level axis, and the statistics needed to denormalize them.
    """
    cfg = model.config
    if not 1 <= h_patches <= cfg.n_token:
        raise ValueError(f"h_patches must be in [1, n_token={cfg.n_token}], got {h_patches}")
    feats, norm = _context_features(context, model)
    with nx.no_grad():
        out = model(feats[None], cache).data[0, -1]
    return np.sort(_chunk(out, h_patches).astype(np.float64), axis=-1), norm


@dataclass
class DecodeState:
    """Everything carried between autoregressive steps.

    Hypothesis ``i`` is the context followed by the level-``i`` path of every
    chunk emitted so far; ``cache`` (if any) holds one batch row per hypothesis.
    """

    model: Model
    context_feats: np.ndarray
    norm: NormStats
    levels: tuple[float, ...]
    mode: str = "arq"
    cache: KVCache | None = None
    chunks: list[np.ndarray] = field(default_factory=list)
    pool: np.ndarray | None = None

    @property
    def n_hypotheses(self) -> int:
        return len(self.levels) if self.mode == "arq" else 1

    def feedback(self, chunk: np.ndarray) -> np.ndarray:
        """Paths appended to each hypothesis for ``chunk``: ``[m, L]``."""
        if self.mode == "arq" or len(self.levels) == 1:
            return chunk.T
        return np.array([[np.interp(0.5, self.levels, row) for row in chunk]])

    def horizon_done(self) -> int:
        return sum(c.shape[0] for c in self.chunks)


def init_state(context: Series, model: Model, mode: str = "arq", use_cache: bool = True) -> DecodeState:
    cfg = model.config
    if mode not in ("arq", "direct"):
        raise ValueError(f"unknown decode mode {mode!r}")
    cache = model.new_cache() if use_cache else None
    first, norm = predict_first(context, model, cfg.n_token, cache)
    feats, _ = _context_features(context, model)
    state = DecodeState(model, feats, norm, cfg.quantile_levels, mode, None, [first])
    if cache is not None:
        state.cache = cache.tiled(state.n_hypotheses)
    return state


def expand_collapse_step(state: DecodeState) -> np.ndarray:
    """Advance every hypothesis by one chunk of ``n_token`` patches.

    Expand: hypothesis ``i`` appends the level-``i`` path of the previous
    chunk and is decoded one step ahead, giving ``m * n_q`` candidates per
    timestep. Collapse: level ``q`` of the new chunk is the empirical
    ``q``-quantile of that pool. In ``direct`` mode the single hypothesis
    feeds back its median and the head quantiles are used as they are.
    """
    model, cfg = state.model, state.model.config
    p = cfg.p_out
    new_paths = state.feedback(state.chunks[-1])
    with nx.no_grad():
        if state.cache is not None:
            out = model(_as_features(new_paths, p), state.cache).data
        else:
            hist = np.concatenate([state.feedback(c) for c in state.chunks], axis=1)
            ctx = np.repeat(state.context_feats[None], hist.shape[0], axis=0)
            out = model(np.concatenate([ctx, _as_features(hist, p)], axis=1)).data
    cands = _chunk(out[:, -1], cfg.n_token).astype(np.float64)  # [m, L, n_q]
    if state.mode == "arq":
        pool = np.transpose(cands, (1, 0, 2)).reshape(cands.shape[1], -1)
        chunk = empirical_quantiles(pool, state.levels)
        state.pool = pool
    else:
        chunk = np.sort(cands[0], axis=-1)
        state.pool = cands[0]
    state.chunks.append(chunk)
    return chunk


def forecast(context: Series, model: Model, horizon: int, mode: str = "arq",
             use_cache: bool = True) -> QuantileForecast:
    """Quantile forecast for ``horizon`` steps after ``context``."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    cfg = model.config
    chunk_len = cfg.n_token * cfg.p_out
    if horizon <= chunk_len:
        first, norm = predict_first(context, model, math.ceil(horizon / cfg.p_out))
        normalized = first
    else:
        state = init_state(context, model, mode, use_cache)
        while state.horizon_done() < horizon:
            expand_collapse_step(state)
        norm = state.norm
        normalized = np.concatenate(state.chunks, axis=0)
    values = np.sort(norm.denormalize(normalized[:horizon]), axis=-1)
    return QuantileForecast(cfg.quantile_levels, values)


def bench_kv(context_len: int, horizon: int, model: Model, seed: int = 0, repeats: int = 1,
             atol: float = 1e-5) -> dict:
    """Time cached vs recomputed decoding after checking they agree within ``atol``."""
    rng = np.random.default_rng(seed)
    t = np.arange(context_len)
    ctx = Series("bench", np.sin(2 * np.pi * t / 24) + 0.1 * rng.standard_normal(context_len))
    timings = {}
    outputs = {}
    for use_cache in (True, False):
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            outputs[use_cache] = forecast(ctx, model, horizon, "arq", use_cache)
            best = min(best, time.perf_counter() - t0)
        timings[use_cache] = best * 1e3
    diff = float(np.max(np.abs(outputs[True].values - outputs[False].values)))
    if diff > atol:
        raise CacheMismatchError(f"cached and uncached forecasts differ by {diff:.3g} > {atol}")
    return {
        "context_len": context_len,
        "horizon": horizon,
        "cached_ms": timings[True],
        "uncached_ms": timings[False],
        "speedup": timings[False] / timings[True],
        "max_abs_diff": diff,
    }


def forecast_record(series_id: str, start_offset: int, qf: QuantileForecast) -> dict:
    return {
        "id": series_id,
        "start_offset": int(start_offset),
        "levels": list(qf.levels),
        "values": qf.values.tolist(),
    }


def write_forecasts(path: str | Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
