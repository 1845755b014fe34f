"""Synthetic corpora: Gaussian-process samples under random kernel
compositions, and convex mixtures of standardized windows."""

from __future__ import annotations

import functools
import operator
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .series import Series


class KernelDegenerateError(RuntimeError):
    pass


class InsufficientPoolError(ValueError):
    pass


@dataclass(frozen=True)
class Kernel:
    """A stationary or linear covariance function over integer time steps.

    ``scale`` is a lengthscale (``rbf``) or period (``periodic``); when
    ``relative`` it is a fraction of the series length.
    """

    kind: str
    scale: float = 1.0
    relative: bool = False

    def resolve(self, length: int) -> float:
        return self.scale * length if self.relative else self.scale

    def gram(self, t: np.ndarray, length: int) -> np.ndarray:
        """Covariance matrix over the evenly spaced steps ``t``."""
        if self.kind == "linear":
            x = t / length
            return 1.0 + np.outer(x, x)
        # stationary: evaluate on lags, expand to a symmetric Toeplitz matrix
        lag = t - t[0]
        s = self.resolve(length)
        if self.kind == "rbf":
            col = np.exp(-0.5 * (lag / s) ** 2)
        elif self.kind == "periodic":
            col = np.exp(-2.0 * np.sin(np.pi * lag / s) ** 2)
        else:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        return scipy.linalg.toeplitz(col)


def default_kernels() -> list[Kernel]:
    return [
        Kernel("linear"),
        Kernel("rbf", 1 / 32, True),
        Kernel("rbf", 1 / 8, True),
        Kernel("rbf", 1 / 2, True),
        Kernel("periodic", 24),
        Kernel("periodic", 7),
        Kernel("periodic", 52),
        Kernel("periodic", 1 / 4, True),
    ]


@dataclass
class KernelBank:
    kernels: list[Kernel] = field(default_factory=default_kernels)
    max_compose: int = 5
    jitter_start: float = 1e-6
    jitter_max: float = 1e-4


def compose_gram(bank: KernelBank, length: int, rng: np.random.Generator) -> np.ndarray:
    """Fold ``j ~ U{1, J}`` randomly drawn kernels with random ``+`` / ``*``."""
    t = np.arange(length, dtype=np.float64)
    j = int(rng.integers(1, bank.max_compose + 1))
    picks = rng.integers(0, len(bank.kernels), size=j)
    ops = rng.integers(0, 2, size=j - 1)
    grams = [bank.kernels[i].gram(t, length) for i in picks]
    return functools.reduce(
        lambda acc, pair: (operator.add if pair[0] == 0 else operator.mul)(acc, pair[1]),
        zip(ops, grams[1:]),
        grams[0],
    )


def cholesky_with_jitter(gram: np.ndarray, start: float = 1e-6, limit: float = 1e-4) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``gram + jitter * I``; jitter is relative to mean diagonal.

    Returns the factor and the absolute jitter used.
    """
    n = gram.shape[0]
    scale = np.trace(gram) / n
    rel = start
    while rel <= limit * (1 + 1e-9):
        jitter = rel * scale
        try:
            return np.linalg.cholesky(gram + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            rel *= 10
    raise KernelDegenerateError(f"gram matrix not positive definite with relative jitter up to {limit}")


def kernelsynth(bank: KernelBank, length: int, seed: int, freq: str = "H") -> Series:
    """One GP sample path of ``length`` steps; a pure function of ``(bank, length, seed)``."""
    if length < 2:
        raise ValueError(f"length must be >= 2, got {length}")
    rng = np.random.default_rng(seed)
    gram = compose_gram(bank, length, rng)
    chol, _ = cholesky_with_jitter(gram, bank.jitter_start, bank.jitter_max)
    values = chol @ rng.standard_normal(length)
    return Series(id=f"kernelsynth-{seed}", values=values, freq=freq)


@dataclass
class MixupConfig:
    k_max: int = 4
    len_min: int = 128
    len_max: int = 4096
    weight_concentration: float = 1.5

    def __post_init__(self):
        if self.k_max < 1 or self.len_min > self.len_max or self.len_min < 1:
            raise ValueError(f"invalid mixup config {self}")


def standardize(x: np.ndarray) -> np.ndarray:
    mean = np.nanmean(x)
    std = np.nanstd(x)
    return (x - mean) / max(std, 1e-3 * abs(mean) + 1e-6)


def mix_windows(windows: list[np.ndarray], weights: np.ndarray, standardize_windows: bool = True) -> np.ndarray:
    """Convex combination of equal-length windows (NaN propagates)."""
    stack = np.stack([standardize(w) if standardize_windows else np.asarray(w, float) for w in windows])
    return np.tensordot(np.asarray(weights, dtype=np.float64), stack, axes=1)


def mixup_weights(k: int, concentration: float, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.full(k, concentration))


def tsmixup(pool: list[Series], cfg: MixupConfig, seed: int, index: int = 0) -> Series:
    """Mix ``k ~ U{1, k_max}`` random windows of a common length ``l``."""
    if not pool:
        raise InsufficientPoolError("empty pool")
    longest = max(len(s) for s in pool)
    if longest < cfg.len_min:
        raise InsufficientPoolError(f"no pool series reaches len_min={cfg.len_min} (longest {longest})")
    rng = np.random.default_rng([seed, index])
    k = int(rng.integers(1, cfg.k_max + 1))
    length = int(rng.integers(cfg.len_min, min(cfg.len_max, longest) + 1))
    eligible = [s for s in pool if len(s) >= length]
    windows = []
    for i in rng.integers(0, len(eligible), size=k):
        src = eligible[i]
        start = int(rng.integers(0, len(src) - length + 1))
        windows.append(src.values[start : start + length])
    weights = mixup_weights(k, cfg.weight_concentration, rng)
    return Series(id=f"tsmixup-{seed}-{index}", values=mix_windows(windows, weights), freq=eligible[0].freq,
                  season_length=eligible[0].season_length)
