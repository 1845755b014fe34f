"""Central finite-difference oracle for tensor ops (independent of backward)."""

from __future__ import annotations

import numpy as np

from moirai2 import numerics as nx

STEP = 1e-3
RTOL = 1e-3


def numeric_grad(f, arrays, idx, probe, step=STEP):
    """d(sum(f(*arrays) * probe)) / d arrays[idx] by central differences.

    The perturbation is applied in float32; the probe-weighted reduction is
    accumulated in float64 so the oracle does not add its own rounding.
    """
    base = [np.array(a, dtype=np.float32) for a in arrays]
    grad = np.zeros(base[idx].shape, dtype=np.float64)
    it = np.nditer(base[idx], flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        vals = []
        for sgn in (1.0, -1.0):
            pert = [a.copy() for a in base]
            pert[idx][i] = np.float32(base[idx][i] + sgn * step)
            h = float(pert[idx][i]) - float(base[idx][i])
            out = f(*[nx.Tensor(a) for a in pert]).data.astype(np.float64)
            vals.append((float((out * probe).sum()), h))
        (fp, hp), (fm, hm) = vals
        grad[i] = (fp - fm) / (hp - hm)
    return grad


def analytic_grad(f, arrays, probe):
    ts = [nx.Tensor(a, requires_grad=True) for a in arrays]
    out = f(*ts)
    nx.backward(nx.tsum(nx.mul(out, probe.astype(np.float32))))
    return [t.grad.astype(np.float64) for t in ts]


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)`` (0 when both vanish)."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def reference_grad(ref, arrays, idx, probe, step=STEP):
    """Central differences of a float64 numpy re-implementation ``ref``.

    Used for composites whose float32 forward rounds away the 1e-3 step.
    """
    base = [np.asarray(a, dtype=np.float32).astype(np.float64) for a in arrays]
    grad = np.zeros(base[idx].shape)
    for i in np.ndindex(base[idx].shape):
        hi = [a.copy() for a in base]
        lo = [a.copy() for a in base]
        hi[idx][i] += step
        lo[idx][i] -= step
        grad[i] = float(((ref(*hi) - ref(*lo)) * probe).sum()) / (2 * step)
    return grad


def check(f, arrays, rng, step=STEP, reference=None):
    """Worst relative error over all inputs of ``f``."""
    out = f(*[nx.Tensor(a) for a in arrays])
    probe = rng.standard_normal(out.shape)
    ana = analytic_grad(f, arrays, probe)
    if reference is None:
        nums = [numeric_grad(f, arrays, i, probe, step) for i in range(len(arrays))]
    else:
        nums = [reference_grad(reference, arrays, i, probe, step) for i in range(len(arrays))]
    return max(rel_error(a, n) for a, n in zip(ana, nums))
