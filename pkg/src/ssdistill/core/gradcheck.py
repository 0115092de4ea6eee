"""Finite-difference verification of analytic gradients.

The contract: `f` maps a leaf Variable to a scalar Variable, deterministically
(any randomness must be frozen by the caller before building the closure).
We compare backward() against central differences coordinate by coordinate
and report the worst relative error.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ContractError, NumericError
from .tensor import Variable, backward, grad_of, leaf


def numeric_grad(f: Callable[[Variable], Variable], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of f at x, evaluated without the tape."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(leaf(x)).item()
        flat[i] = orig - h
        fm = f(leaf(x)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"objective non-finite during finite differencing at index {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def analytic_grad(f: Callable[[Variable], Variable], x: np.ndarray) -> np.ndarray:
    v = leaf(np.asarray(x, dtype=np.float64), requires_grad=True)
    out = f(v)
    if out.value.shape != ():
        raise ContractError(f"gradcheck objective must be scalar, got shape {out.shape}")
    grads = backward(out, wrt=[v])
    return grad_of(grads, v)


def finite_diff_check(f: Callable[[Variable], Variable], x: np.ndarray, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central| / max(|analytic|, |central|, 1e-12)."""
    ana = analytic_grad(f, x)
    num = numeric_grad(f, x, h=h)
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-12)
    return float(np.max(np.abs(ana - num) / denom))
