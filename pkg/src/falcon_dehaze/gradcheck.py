"""Finite-difference gradient oracles.

The oracle re-evaluates the scalar function in float64 so that the
differencing error stays well below the checked tolerance, while the
analytic gradient under test comes from the float32 tape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, default_dtype, no_grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def numerical_grad(
    fn: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    index: int,
    eps: float = 1e-3,
    elements: np.ndarray | None = None,
) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. ``arrays[index]``.

    ``fn`` receives float64 tensors built from ``arrays``. When ``elements``
    (flat indices) is given only those entries are differenced; the rest of
    the returned array is NaN.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    flat = target.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if elements is None else elements
    with default_dtype(np.float64), no_grad():
        tensors = [Tensor(a) for a in base]
        tflat = tensors[index].data.reshape(-1)
        for i in idx:
            orig = tflat[i]
            tflat[i] = orig + eps
            fp = float(fn(tensors).data)
            tflat[i] = orig - eps
            fm = float(fn(tensors).data)
            tflat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    return out.reshape(target.shape)


def analytic_grads(fn: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    tensors = [Tensor(np.asarray(a, dtype=np.float32), requires_grad=True) for a in arrays]
    fn(tensors).backward()
    return [t.grad for t in tensors]


def check_gradients(
    fn: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-3
) -> list[float]:
    """Relative error between tape and finite-difference gradients, one per input."""
    analytic = analytic_grads(fn, arrays)
    return [relative_error(analytic[i], numerical_grad(fn, arrays, i, eps)) for i in range(len(arrays))]
