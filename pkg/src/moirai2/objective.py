"""Pinball (quantile) loss, scalar and tensor forms."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor


class InvalidQuantileError(ValueError):
    pass


class EmptyLossError(ValueError):
    """Every target was masked, so the loss has no terms."""


def _check_level(q: float) -> None:
    if not 0.0 < q < 1.0:
        raise InvalidQuantileError(f"quantile level must lie in (0, 1), got {q}")


def pinball(y: float, y_hat: float, q: float) -> float:
    _check_level(q)
    return q * (y - y_hat) if y >= y_hat else (1.0 - q) * (y_hat - y)


@dataclass
class LossReport:
    total: float
    per_quantile: list[float]
    n_terms: int


def pinball_tensor(preds, targets: np.ndarray, levels: np.ndarray, weight: np.ndarray) -> Tensor:
    """Weighted elementwise pinball loss, summed to a scalar.

    ``levels`` broadcasts against ``preds``; ``weight`` carries the target mask
    and any per-quantile weighting. At ``y == y_hat`` the ``y >= y_hat`` branch
    is taken, so the gradient there is ``-q``.
    """
    preds = nx.as_tensor(preds)
    diff = targets - preds.data
    above = diff >= 0
    terms = np.where(above, levels * diff, (1.0 - levels) * -diff) * weight
    dpred = np.where(above, -levels, 1.0 - levels) * weight

    def backward(g):
        return (np.asarray(g * dpred, dtype=np.float32),)

    return nx.custom_op(terms.sum(), (preds,), backward, "pinball")


def quantile_loss(
    targets,
    mask,
    preds,
    levels: Sequence[float],
    weights: Sequence[float] | None = None,
    patch_size: int | None = None,
) -> tuple[Tensor, LossReport]:
    """Mean pinball loss over every unmasked (timestep, level) pair.

    ``preds`` is ``[n_q, H]``; ``mask`` is 1 where the target counts. The mean
    divides by the number of counted terms, not by ``H * n_q``.
    """
    targets = np.asarray(targets, dtype=np.float32).reshape(-1)
    mask = np.asarray(mask, dtype=np.float32).reshape(-1)
    preds = nx.as_tensor(preds)
    lv = np.asarray(levels, dtype=np.float32)
    for q in lv:
        _check_level(float(q))
    h = targets.shape[0]
    if preds.shape != (lv.size, h) or mask.shape != (h,):
        raise DimensionError(f"preds {preds.shape}, targets ({h},), mask {mask.shape}, {lv.size} levels")
    if patch_size is not None and h % patch_size:
        raise DimensionError(f"horizon {h} is not a whole number of {patch_size}-patches")
    w = np.ones_like(lv) if weights is None else np.asarray(weights, dtype=np.float32)
    n_terms = int(mask.sum()) * lv.size
    if n_terms == 0:
        raise EmptyLossError("all targets are masked")
    weight = (w[:, None] * mask[None, :]) / n_terms
    total = pinball_tensor(preds, targets[None, :], lv[:, None], weight)

    per_q = []
    for i, q in enumerate(lv):
        d = targets - preds.data[i]
        per_q.append(float((np.where(d >= 0, q * d, (q - 1.0) * d) * mask).sum() / mask.sum()))
    return total, LossReport(total.item(), per_q, n_terms)


def batch_quantile_loss(preds, targets: np.ndarray, mask: np.ndarray, levels: Sequence[float],
                        weights: Sequence[float] | None = None) -> Tensor:
    """Training form: ``preds [..., n_q, p]`` against ``targets``/``mask`` of shape ``[..., p]``."""
    preds = nx.as_tensor(preds)
    lv = np.asarray(levels, dtype=np.float32)
    w = np.ones_like(lv) if weights is None else np.asarray(weights, dtype=np.float32)
    n_terms = float(mask.sum()) * lv.size
    if n_terms == 0:
        raise EmptyLossError("all targets are masked")
    tgt = np.expand_dims(targets, -2)
    weight = w[:, None] * np.expand_dims(mask, -2) / n_terms
    return pinball_tensor(preds, tgt, lv[:, None], weight)
