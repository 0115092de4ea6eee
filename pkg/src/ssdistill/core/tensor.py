"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

A Variable wraps an ndarray plus the closure needed to push gradients back
to its parents. Building a graph is just calling the ops below; backward()
walks the tape in reverse topological order and returns a gradient map keyed
by node id. Only float32/float64 arrays are allowed, every op validates its
input shapes, and any non-finite value raised during forward or backward
aborts with a NumericError naming the op that produced it.

The op set is intentionally small: exactly what the models, losses and the
meta-gradient need. Convolution is im2col plus one BLAS matmul; the linear
solve is a Cholesky primitive with an analytic adjoint so the meta-gradient
never materializes an inverse.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

from ..errors import ContractError, DimensionError, NumericError, SingularSystemError

DTYPES = {"f32": np.float32, "f64": np.float64}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_node_ids = itertools.count()


def dtype_of(name: str) -> np.dtype:
    if name not in DTYPES:
        raise ContractError(f"unknown dtype {name!r}; expected one of {sorted(DTYPES)}")
    return np.dtype(DTYPES[name])


def dtype_name(dt) -> str:
    dt = np.dtype(dt)
    if dt not in _NAMES:
        raise ContractError(f"unsupported dtype {dt}; only f32/f64 tensors exist here")
    return _NAMES[dt]


def _check_finite(arr: np.ndarray, op: str) -> None:
    if arr.size == 0:
        return
    # min/max both come out NaN if any element is NaN; +-inf also caught
    lo, hi = arr.min(), arr.max()
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NumericError(f"non-finite values produced by op {op!r}")


def as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype not in _NAMES:
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            arr = arr.astype(np.float64)
        elif not np.issubdtype(arr.dtype, np.floating):
            raise ContractError(f"cannot build a tensor from dtype {arr.dtype}")
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    if arr.dtype not in _NAMES:
        arr = arr.astype(np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Variable:
    """A node in the tape: value, optional grad slot, and the backward rule."""

    __slots__ = ("value", "requires_grad", "grad", "node_id", "_parents", "_vjp", "op")

    def __init__(self, value, requires_grad: bool = False, *, _parents=(), _vjp=None, op="leaf"):
        self.value = as_array(value)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    # convenience views ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def __repr__(self) -> str:
        return f"Variable(op={self.op!r}, shape={self.shape}, dtype={dtype_name(self.dtype)})"

    def item(self) -> float:
        if self.value.shape != ():
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.value)

    def detach(self) -> "Variable":
        return Variable(self.value, requires_grad=False, op="detach")

    # operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))

    def __pow__(self, p):
        return pow_(self, p)


def leaf(value, requires_grad: bool = False, dtype=None) -> Variable:
    return Variable(as_array(value, dtype), requires_grad=requires_grad)


def constant(value, dtype=None) -> Variable:
    return Variable(as_array(value, dtype), requires_grad=False, op="const")


def _wrap(x, dtype) -> Variable:
    if isinstance(x, Variable):
        return x
    return Variable(as_array(x, dtype), op="const")


def _make(value: np.ndarray, parents: Sequence[Variable], vjp, op: str) -> Variable:
    _check_finite(value, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Variable(value, op=op)
    out = Variable(value, requires_grad=True, _parents=tuple(parents), _vjp=vjp, op=op)
    return out


# -- broadcasting helpers ------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Variable, b: Variable, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ops -----------------------------------------------------------


def add(a: Variable, b: Variable) -> Variable:
    _check_broadcast(a, b, "add")
    val = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(val, (a, b), vjp, "add")


def sub(a: Variable, b: Variable) -> Variable:
    _check_broadcast(a, b, "sub")
    val = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(val, (a, b), vjp, "sub")


def mul(a: Variable, b: Variable) -> Variable:
    _check_broadcast(a, b, "mul")
    val = a.value * b.value

    def vjp(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(val, (a, b), vjp, "mul")


def div(a: Variable, b: Variable) -> Variable:
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        val = a.value / b.value

    def vjp(g):
        ga = g / b.value
        gb = -g * a.value / (b.value * b.value)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(val, (a, b), vjp, "div")


def neg(a: Variable) -> Variable:
    def vjp(g):
        return (-g,)

    return _make(-a.value, (a,), vjp, "neg")


def pow_(a: Variable, p: float) -> Variable:
    p = float(p)
    val = a.value**p

    def vjp(g):
        return (g * p * a.value ** (p - 1.0),)

    return _make(val, (a,), vjp, "pow")


def square(a: Variable) -> Variable:
    def vjp(g):
        return (g * (2.0 * a.value),)

    return _make(a.value * a.value, (a,), vjp, "square")


def exp(a: Variable) -> Variable:
    with np.errstate(over="ignore"):
        val = np.exp(a.value)

    def vjp(g):
        return (g * val,)

    return _make(val, (a,), vjp, "exp")


def log(a: Variable) -> Variable:
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(a.value)

    def vjp(g):
        return (g / a.value,)

    return _make(val, (a,), vjp, "log")


def sqrt(a: Variable) -> Variable:
    with np.errstate(invalid="ignore"):
        val = np.sqrt(a.value)

    def vjp(g):
        return (g * (0.5 / val),)

    return _make(val, (a,), vjp, "sqrt")


def relu(a: Variable) -> Variable:
    val = np.maximum(a.value, 0)

    def vjp(g):
        return (g * (a.value > 0),)

    return _make(val, (a,), vjp, "relu")


# -- shape ops ------------------------------------------------------------------


def reshape(a: Variable, shape) -> Variable:
    shape = tuple(int(s) for s in shape)
    try:
        val = a.value.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make(np.ascontiguousarray(val), (a,), vjp, "reshape")


def transpose(a: Variable) -> Variable:
    if a.value.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return _make(np.ascontiguousarray(a.value.T), (a,), vjp, "transpose")


def permute(a: Variable, axes: Sequence[int]) -> Variable:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.value.ndim)):
        raise DimensionError(f"permute: axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(a.value.transpose(axes)), (a,), vjp, "permute")


def sum_(a: Variable, axis=None, keepdims: bool = False) -> Variable:
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(np.asarray(val), (a,), vjp, "sum")


def mean_(a: Variable, axis=None, keepdims: bool = False) -> Variable:
    if axis is None:
        count = a.value.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in ax]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), constant(1.0 / count, a.dtype))


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Variable, b: Variable) -> Variable:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    val = a.value @ b.value

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return _make(val, (a, b), vjp, "matmul")


def _factor_spd(S: np.ndarray):
    """Cholesky with escalating jitter: try S, then S + j*I with j growing x10.

    Returns (lower factor, jitter actually added). Raises SingularSystemError
    if the matrix still fails after three escalations.
    """
    n = S.shape[0]
    base = max(float(np.trace(S)) / n, 1.0) * 1e-10
    jitter = 0.0
    for attempt in range(4):
        try:
            M = S if jitter == 0.0 else S + jitter * np.eye(n, dtype=S.dtype)
            return np.linalg.cholesky(M), jitter
        except np.linalg.LinAlgError:
            jitter = base if jitter == 0.0 else jitter * 10.0
    raise SingularSystemError(
        f"cholesky failed for {n}x{n} system even with jitter {jitter / 10.0:.3e}"
    )


def _residual_tol(dt) -> float:
    return 1e-8 if np.dtype(dt) == np.float64 else 1e-4


def spd_solve_value(S: np.ndarray, Y: np.ndarray):
    """Solve S A = Y for SPD S. Returns (A, lower factor, jitter used).

    The relative residual ||S A - Y||_F / max(||Y||_F, eps) is checked at a
    dtype-dependent tolerance; a violation raises NumericError.
    """
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"spd_solve: system matrix must be square, got {S.shape}")
    if Y.ndim != 2 or Y.shape[0] != S.shape[0]:
        raise DimensionError(f"spd_solve: rhs {Y.shape} does not match system {S.shape}")
    L, jitter = _factor_spd(S)
    A = scipy.linalg.cho_solve((L, True), Y, check_finite=False)
    Sj = S if jitter == 0.0 else S + jitter * np.eye(S.shape[0], dtype=S.dtype)
    res = np.linalg.norm(Sj @ A - Y) / max(np.linalg.norm(Y), 1e-12)
    if not np.isfinite(res) or res > _residual_tol(S.dtype):
        raise NumericError(f"spd_solve residual {res:.3e} exceeds tolerance")
    _check_finite(A, "spd_solve")
    return A, L, jitter


def spd_solve(S: Variable, Y: Variable) -> Variable:
    """Differentiable SPD solve A = S^{-1} Y via Cholesky.

    Adjoint: given Abar, Ybar = S^{-1} Abar and Sbar = -Ybar A^T. The Sbar
    term is returned unsymmetrized; when S was produced as F F^T the matmul
    vjp distributes it correctly to both factors.
    """
    A, L, _ = spd_solve_value(S.value, Y.value)

    def vjp(g):
        ybar = scipy.linalg.cho_solve((L, True), g, check_finite=False)
        sbar = -ybar @ A.T
        return sbar, ybar

    return _make(A, (S, Y), vjp, "spd_solve")


# -- neural net primitives ---------------------------------------------------------


def conv2d(x: Variable, w: Variable, b: Variable, pad: int | None = None) -> Variable:
    """Same-padded stride-1 convolution on NHWC input.

    x: (B, H, W, Cin), w: (k, k, Cin, Cout), b: (Cout,). Default pad keeps the
    spatial size (requires odd k). Internally: zero-pad, im2col into a
    (B*H*W, k*k*Cin) matrix, one matmul against the reshaped kernel.
    """
    if x.value.ndim != 4:
        raise DimensionError(f"conv2d input must be NHWC, got shape {x.shape}")
    if w.value.ndim != 4 or w.shape[0] != w.shape[1]:
        raise DimensionError(f"conv2d kernel must be (k,k,Cin,Cout), got {w.shape}")
    k = w.shape[0]
    if pad is None:
        if k % 2 == 0:
            raise ContractError(f"same-padding needs odd kernel size, got k={k}")
        pad = (k - 1) // 2
    B, H, W, Cin = x.shape
    if w.shape[2] != Cin:
        raise DimensionError(f"conv2d: input has {Cin} channels, kernel expects {w.shape[2]}")
    Cout = w.shape[3]
    if b.shape != (Cout,):
        raise DimensionError(f"conv2d bias must be ({Cout},), got {b.shape}")
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d: kernel {k} too large for input {H}x{W} with pad {pad}")

    xp = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: (B, Ho, Wo, Cin, k, k) -> cols ordered (ki, kj, cin) to match kernel layout
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, k * k * Cin)
    wmat = w.value.reshape(k * k * Cin, Cout)
    out = (cols @ wmat + b.value).reshape(B, Ho, Wo, Cout)

    def vjp(g):
        gmat = g.reshape(B * Ho * Wo, Cout)
        gw = (cols.T @ gmat).reshape(w.shape)
        gb = gmat.sum(axis=0)
        gcols = (gmat @ wmat.T).reshape(B, Ho, Wo, k, k, Cin)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki : ki + Ho, kj : kj + Wo, :] += gcols[:, :, :, ki, kj, :]
        gx = gxp[:, pad : pad + H, pad : pad + W, :] if pad else gxp
        return np.ascontiguousarray(gx), gw, gb

    return _make(out, (x, w, b), vjp, "conv2d")


def avg_pool2(x: Variable) -> Variable:
    """2x2 average pooling with stride 2 on NHWC input; H and W must be even."""
    if x.value.ndim != 4:
        raise DimensionError(f"avg_pool2 input must be NHWC, got shape {x.shape}")
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {H}x{W}")
    val = x.value.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def vjp(g):
        gx = np.broadcast_to(
            g[:, :, None, :, None, :] * 0.25, (B, H // 2, 2, W // 2, 2, C)
        ).reshape(B, H, W, C)
        return (np.ascontiguousarray(gx),)

    return _make(val, (x,), vjp, "avg_pool2")


def batch_norm(
    x: Variable,
    gamma: Variable,
    beta: Variable,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    axes: tuple,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Variable:
    """Batch normalization over `axes` with three modes.

    "train": normalize by batch statistics, update running stats in place.
    "batch_stats": normalize by batch statistics, leave running stats alone
    (used at knowledge-distillation time, including evaluation).
    "eval": normalize by the running statistics.

    Gradients flow to x, gamma, beta; in the batch-statistics modes the
    backward pass differentiates through the mean and variance.
    """
    if mode not in ("train", "eval", "batch_stats"):
        raise ContractError(f"batch_norm mode must be train/eval/batch_stats, got {mode!r}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batch_norm scale/shift must be ({c},), got {gamma.shape} and {beta.shape}"
        )
    if mode in ("train", "batch_stats"):
        count = int(np.prod([x.shape[i] for i in axes]))
        if count < 2:
            raise ContractError(
                f"batch_norm with batch statistics needs >= 2 samples per channel, got {count}"
            )
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.value - mu) * inv_std
        if mode == "train":
            unbias = count / max(count - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * unbias
        val = gamma.value * xhat + beta.value

        def vjp(g):
            ggamma = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            gh = g * gamma.value
            m1 = gh.mean(axis=axes)
            m2 = (gh * xhat).mean(axis=axes)
            gx = inv_std * (gh - m1 - xhat * m2)
            return np.ascontiguousarray(gx), ggamma, gbeta

        return _make(val, (x, gamma, beta), vjp, "batch_norm")

    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.value - running_mean) * inv_std
    val = gamma.value * xhat + beta.value

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = g * (gamma.value * inv_std)
        return np.ascontiguousarray(gx), ggamma, gbeta

    return _make(val, (x, gamma, beta), vjp, "batch_norm")


def log_softmax(x: Variable) -> Variable:
    """Row-wise log-softmax for (B, C) inputs, computed stably."""
    if x.value.ndim != 2:
        raise DimensionError(f"log_softmax expects (B, C), got shape {x.shape}")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    val = shifted - lse
    soft = np.exp(val)

    def vjp(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _make(val, (x,), vjp, "log_softmax")


# -- backward pass --------------------------------------------------------------


def _topo(root: Variable) -> list:
    """Reverse-mode schedule: nodes reachable through requires_grad parents,
    in topological order (parents before children)."""
    order: list[Variable] = []
    seen: set[int] = set()
    stack: list[tuple[Variable, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Variable, wrt: Iterable[Variable] | None = None) -> dict:
    """Accumulate d(loss)/d(node) for every requires_grad node reachable from
    `loss`. Returns {node_id: ndarray}; also fills .grad on leaves. Leaves in
    `wrt` that the graph never touches get explicit zero gradients.
    """
    if loss.value.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any requires_grad leaf")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=loss.dtype)}
    for node in reversed(_topo(loss)):
        g = grads.get(node.node_id)
        if g is None or node._vjp is None:
            continue
        parts = node._vjp(g)
        for parent, part in zip(node._parents, parts):
            if part is None or not parent.requires_grad:
                continue
            part = np.asarray(part, dtype=parent.dtype)
            if part.shape != parent.value.shape:
                raise NumericError(
                    f"vjp of {node.op!r} produced shape {part.shape} for parent "
                    f"shape {parent.value.shape}"
                )
            _check_finite(part, f"{node.op}.backward")
            acc = grads.get(parent.node_id)
            grads[parent.node_id] = part.copy() if acc is None else acc + part
    if wrt is not None:
        for v in wrt:
            if v.node_id not in grads:
                grads[v.node_id] = np.zeros_like(v.value)
    for node in _walk_leaves(loss):
        if node.requires_grad and node._vjp is None and node.node_id in grads:
            node.grad = grads[node.node_id]
    if wrt is not None:
        for v in wrt:
            v.grad = grads[v.node_id]
    return grads


def _walk_leaves(root: Variable):
    for node in _topo(root):
        if node._vjp is None:
            yield node


def grad_of(grads: dict, var: Variable) -> np.ndarray:
    """Fetch var's gradient from a backward() map, zeros if unreached."""
    g = grads.get(var.node_id)
    if g is None:
        return np.zeros_like(var.value)
    return g
