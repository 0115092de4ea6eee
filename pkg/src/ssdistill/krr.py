"""Kernel ridge readout on extractor features, and the gradient through it.

The readout treats the current feature extractor as a fixed feature map: the
kernel between two batches is the inner product of their features. Fitting on
the distilled pairs (X_s, Y_s) is a single SPD solve, so the distillation
loss on a real batch is an explicit differentiable function of X_s and Y_s;
no unrolling through inner training steps, and therefore none of the
stochastic-gradient bias that unrolling a sampled objective brings.

The ridge amplitude defaults to trace scaling, lam = base * tr(K) / m,
resolved inside the graph so its dependence on X_s is differentiated too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import tensor as T
from .core.tensor import Variable
from .errors import ConfigError, DimensionError
from .models import FeatureExtractor

RIDGE_MODES = ("trace_scaled", "absolute")


@dataclass(frozen=True)
class RidgeConfig:
    mode: str = "trace_scaled"
    base: float = 1e-6

    def validate(self) -> None:
        if self.mode not in RIDGE_MODES:
            raise ConfigError(f"ridge mode must be one of {RIDGE_MODES}, got {self.mode!r}")
        if self.base <= 0:
            raise ConfigError(f"ridge base must be > 0, got {self.base}")


def resolve_lambda(K: np.ndarray, cfg: RidgeConfig) -> float:
    """Value-level ridge amplitude. A degenerate zero-trace kernel falls back
    to the absolute base so the amplitude stays positive."""
    cfg.validate()
    if cfg.mode == "absolute":
        return cfg.base
    m = K.shape[0]
    tr = float(np.trace(K))
    return cfg.base * tr / m if tr > 0 else cfg.base


@dataclass
class KrrSolveResult:
    coef: np.ndarray  # (m, d_y): (K + lam I)^{-1} Y
    lam: float
    jitter: float
    residual: float


def solve_krr(K: np.ndarray, Y: np.ndarray, cfg: RidgeConfig) -> KrrSolveResult:
    """Fit the readout coefficients for kernel K and targets Y."""
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionError(f"kernel must be square, got {K.shape}")
    if Y.ndim != 2 or Y.shape[0] != K.shape[0]:
        raise DimensionError(f"targets {Y.shape} do not match kernel {K.shape}")
    lam = resolve_lambda(K, cfg)
    S = K + lam * np.eye(K.shape[0], dtype=K.dtype)
    A, _, jitter = T.spd_solve_value(S, Y)
    Sj = S if jitter == 0.0 else S + jitter * np.eye(K.shape[0], dtype=K.dtype)
    residual = float(np.linalg.norm(Sj @ A - Y) / max(np.linalg.norm(Y), 1e-12))
    return KrrSolveResult(coef=A, lam=lam, jitter=jitter, residual=residual)


def krr_predict(F_query: np.ndarray, F_support: np.ndarray, result: KrrSolveResult) -> np.ndarray:
    """Readout predictions for query features given a fitted solve."""
    if F_query.shape[1] != F_support.shape[1]:
        raise DimensionError(
            f"query features {F_query.shape} vs support features {F_support.shape}"
        )
    if F_support.shape[0] != result.coef.shape[0]:
        raise DimensionError(
            f"support of {F_support.shape[0]} rows vs coefficients {result.coef.shape}"
        )
    return F_query @ (F_support.T @ result.coef)


# -- differentiable path ---------------------------------------------------------


def _lambda_var(K: Variable, cfg: RidgeConfig) -> Variable:
    m = K.shape[0]
    if cfg.mode == "absolute":
        return T.constant(cfg.base, K.dtype)
    eye = T.constant(np.eye(m, dtype=K.value.dtype))
    return T.sum_(K * eye) * T.constant(cfg.base / m, K.dtype)


def outer_loss_graph(
    extractor: FeatureExtractor,
    xs: Variable,
    ys: Variable,
    X_batch: np.ndarray,
    targets: np.ndarray,
    ridge: RidgeConfig,
) -> tuple[Variable, dict]:
    """0.5 * ||targets - readout(X_batch)||_F^2 as a graph over xs and ys.

    The extractor's parameters enter as constants (it is a snapshot from the
    pool); features use batch statistics, matching how the inner training
    sees the network, without touching its running buffers. Returns the loss
    Variable plus solve diagnostics.
    """
    ridge.validate()
    m = xs.shape[0]
    if ys.shape[0] != m:
        raise DimensionError(f"distilled inputs {xs.shape} vs targets {ys.shape}")
    if targets.shape != (X_batch.shape[0], ys.shape[1]):
        raise DimensionError(
            f"batch targets {targets.shape} do not match batch {X_batch.shape[0]} "
            f"x embed dim {ys.shape[1]}"
        )
    F_s = extractor.forward(xs, mode="batch_stats")
    K = T.matmul(F_s, T.transpose(F_s))
    lam = _lambda_var(K, ridge)
    eye = T.constant(np.eye(m, dtype=K.value.dtype))
    S = K + lam * eye
    A = T.spd_solve(S, ys)
    F_t = extractor.forward(X_batch, mode="batch_stats")
    pred = T.matmul(F_t, T.matmul(T.transpose(F_s), A))
    diff = T.constant(targets, pred.dtype) - pred
    loss = T.constant(0.5, pred.dtype) * T.sum_(T.square(diff))
    info = {"lam": float(lam.value), "kernel_trace": float(np.trace(K.value))}
    return loss, info


@dataclass
class MetaGrad:
    gxs: np.ndarray
    gys: np.ndarray
    loss: float
    lam: float


def meta_grad(
    extractor: FeatureExtractor,
    xs: np.ndarray,
    ys: np.ndarray,
    X_batch: np.ndarray,
    targets: np.ndarray,
    ridge: RidgeConfig,
) -> MetaGrad:
    """Gradient of the readout loss with respect to the distilled set."""
    xs_v = T.leaf(xs, requires_grad=True)
    ys_v = T.leaf(ys, requires_grad=True)
    loss, info = outer_loss_graph(extractor, xs_v, ys_v, X_batch, targets, ridge)
    grads = T.backward(loss, wrt=[xs_v, ys_v])
    return MetaGrad(
        gxs=T.grad_of(grads, xs_v),
        gys=T.grad_of(grads, ys_v),
        loss=loss.item(),
        lam=info["lam"],
    )


def outer_loss_value(
    extractor: FeatureExtractor,
    xs: np.ndarray,
    ys: np.ndarray,
    X_batch: np.ndarray,
    targets: np.ndarray,
    ridge: RidgeConfig,
) -> float:
    loss, _ = outer_loss_graph(extractor, T.constant(xs), T.constant(ys), X_batch, targets, ridge)
    return loss.item()
