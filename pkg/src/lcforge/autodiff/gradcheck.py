"""Central-difference helpers for checking analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradient(
    f: Callable[[], Tensor],
    target: Tensor,
    indices: Optional[Iterable[tuple]] = None,
    h: float = 1e-6,
) -> np.ndarray:
    """Estimate d f() / d target at ``indices`` (all entries by default).

    ``f`` is re-evaluated with ``target.data`` perturbed in place; it must
    return a scalar tensor. Entries not listed in ``indices`` are left at 0.
    """
    grad = np.zeros(target.shape, dtype=np.float64)
    if indices is None:
        indices = list(np.ndindex(*target.shape))
    with no_grad():
        for idx in indices:
            orig = target.data[idx].copy()
            target.data[idx] = orig + h
            plus = float(f().data)
            target.data[idx] = orig - h
            minus = float(f().data)
            target.data[idx] = orig
            grad[idx] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|)``; pairs where both are below ``floor`` count as 0."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(n))
    err = np.abs(a - n) / np.where(scale > floor, scale, 1.0)
    return np.where(scale > floor, err, 0.0)
