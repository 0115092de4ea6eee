"""Feature extractors and linear heads.

Two backbones: a ConvNet of repeated conv/batch-norm/relu/avg-pool blocks on
flattened image rows, and an MLP for flat inputs. Both expose features
through the same interface so the kernel machinery downstream never cares
which one it got. Parameters live in a plain name->ndarray dict; the forward
pass accepts an optional dict of Variables so a training loop (or the
meta-gradient) can differentiate with respect to any subset.

Forward modes: "train" updates batch-norm running statistics, "eval" uses
them, "batch_stats" normalizes by the current batch without touching them.
A frozen extractor refuses "train" outright.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bundle
from .core import tensor as T
from .core.rng import RngState
from .core.tensor import Variable
from .errors import ConfigError, ContractError, DimensionError, FormatError

MODES = ("train", "eval", "batch_stats")


@dataclass(frozen=True)
class ConvNetConfig:
    depth: int = 3
    width: int = 32
    in_shape: tuple[int, int, int] = (3, 16, 16)  # channels, height, width
    kernel: int = 3
    norm: str = "batch_norm"  # or "none"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dtype: str = "f64"

    def validate(self) -> None:
        c, h, w = self.in_shape
        if self.depth < 1:
            raise ConfigError(f"convnet depth must be >= 1, got {self.depth}")
        if self.width < 1:
            raise ConfigError(f"convnet width must be >= 1, got {self.width}")
        if self.kernel % 2 != 1:
            raise ConfigError(f"convnet kernel must be odd, got {self.kernel}")
        if self.norm not in ("batch_norm", "none"):
            raise ConfigError(f"norm must be batch_norm or none, got {self.norm!r}")
        if min(c, h, w) < 1:
            raise ConfigError(f"bad input shape {self.in_shape}")
        # each block halves the spatial extent; require clean divisibility
        if h % (2**self.depth) or w % (2**self.depth):
            raise ConfigError(
                f"input {h}x{w} not divisible by 2^depth = {2**self.depth}; "
                "pooling would truncate"
            )
        T.dtype_of(self.dtype)

    @property
    def in_dim(self) -> int:
        c, h, w = self.in_shape
        return c * h * w

    @property
    def feature_dim(self) -> int:
        _, h, w = self.in_shape
        return self.width * (h // 2**self.depth) * (w // 2**self.depth)

    def to_dict(self) -> dict:
        return {
            "kind": "convnet",
            "depth": self.depth,
            "width": self.width,
            "in_shape": list(self.in_shape),
            "kernel": self.kernel,
            "norm": self.norm,
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
            "dtype": self.dtype,
        }


@dataclass(frozen=True)
class MlpConfig:
    in_dim: int
    hidden: tuple[int, ...] = (128,)
    feature_dim: int = 64
    dtype: str = "f64"

    def validate(self) -> None:
        if self.in_dim < 1 or self.feature_dim < 1:
            raise ConfigError(f"mlp dims must be >= 1, got {self.in_dim}/{self.feature_dim}")
        if len(self.hidden) < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError(f"mlp needs at least one positive hidden width, got {self.hidden}")
        T.dtype_of(self.dtype)

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "in_dim": self.in_dim,
            "hidden": list(self.hidden),
            "feature_dim": self.feature_dim,
            "dtype": self.dtype,
        }


def config_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "convnet":
        cfg = ConvNetConfig(
            depth=int(d["depth"]),
            width=int(d["width"]),
            in_shape=tuple(int(x) for x in d["in_shape"]),
            kernel=int(d.get("kernel", 3)),
            norm=d.get("norm", "batch_norm"),
            bn_eps=float(d.get("bn_eps", 1e-5)),
            bn_momentum=float(d.get("bn_momentum", 0.1)),
            dtype=d.get("dtype", "f64"),
        )
    elif kind == "mlp":
        cfg = MlpConfig(
            in_dim=int(d["in_dim"]),
            hidden=tuple(int(x) for x in d["hidden"]),
            feature_dim=int(d["feature_dim"]),
            dtype=d.get("dtype", "f64"),
        )
    else:
        raise FormatError(f"unknown model kind {kind!r}")
    cfg.validate()
    return cfg


def he_normal(rng: RngState, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return rng.normal(shape, std=np.sqrt(2.0 / fan_in)).astype(dtype)


class FeatureExtractor:
    """A backbone with named params and batch-norm buffers."""

    def __init__(self, cfg, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray], frozen: bool = False):
        self.cfg = cfg
        self.params = params
        self.buffers = buffers
        self.frozen = frozen
        if frozen:
            self._lock()

    # -- construction ------------------------------------------------------

    @classmethod
    def init(cls, rng: RngState, cfg) -> "FeatureExtractor":
        cfg.validate()
        dt = T.dtype_of(cfg.dtype)
        params: dict[str, np.ndarray] = {}
        buffers: dict[str, np.ndarray] = {}
        if isinstance(cfg, ConvNetConfig):
            cin = cfg.in_shape[0]
            k = cfg.kernel
            for i in range(cfg.depth):
                params[f"conv{i}.w"] = he_normal(rng, (k, k, cin, cfg.width), k * k * cin, dt)
                params[f"conv{i}.b"] = np.zeros(cfg.width, dtype=dt)
                if cfg.norm == "batch_norm":
                    params[f"bn{i}.gamma"] = np.ones(cfg.width, dtype=dt)
                    params[f"bn{i}.beta"] = np.zeros(cfg.width, dtype=dt)
                    buffers[f"bn{i}.mean"] = np.zeros(cfg.width, dtype=dt)
                    buffers[f"bn{i}.var"] = np.ones(cfg.width, dtype=dt)
                cin = cfg.width
        elif isinstance(cfg, MlpConfig):
            dims = (cfg.in_dim,) + cfg.hidden + (cfg.feature_dim,)
            for i, (din, dout) in enumerate(zip(dims, dims[1:])):
                params[f"fc{i}.w"] = he_normal(rng, (din, dout), din, dt)
                params[f"fc{i}.b"] = np.zeros(dout, dtype=dt)
        else:
            raise ConfigError(f"unknown config type {type(cfg).__name__}")
        return cls(cfg, params, buffers)

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    @property
    def in_dim(self) -> int:
        return self.cfg.in_dim if isinstance(self.cfg, ConvNetConfig) else self.cfg.in_dim

    def copy(self) -> "FeatureExtractor":
        return FeatureExtractor(
            self.cfg,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def _lock(self) -> None:
        for arr in (*self.params.values(), *self.buffers.values()):
            arr.flags.writeable = False

    def freeze(self) -> "FeatureExtractor":
        self.frozen = True
        self._lock()
        return self

    # -- forward -----------------------------------------------------------

    def param_variables(self, requires_grad: bool = True) -> dict[str, Variable]:
        if requires_grad and self.frozen:
            raise ContractError("frozen extractor: params cannot require gradients")
        return {k: T.leaf(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def forward(self, x, mode: str = "eval", param_vars: dict[str, Variable] | None = None) -> Variable:
        """Features for a batch of flattened rows. x: (B, in_dim) array or
        Variable; returns (B, feature_dim) Variable."""
        if mode not in MODES:
            raise ContractError(f"forward mode must be one of {MODES}, got {mode!r}")
        if self.frozen and mode == "train":
            raise ContractError("frozen extractor cannot run in train mode")
        xv = x if isinstance(x, Variable) else T.constant(x, T.dtype_of(self.cfg.dtype))
        if xv.value.ndim != 2 or xv.shape[1] != self.in_dim:
            raise DimensionError(
                f"extractor expects (B, {self.in_dim}) rows, got {xv.shape}"
            )
        p = param_vars if param_vars is not None else {
            k: T.constant(v) for k, v in self.params.items()
        }
        if isinstance(self.cfg, ConvNetConfig):
            return self._forward_conv(xv, p, mode)
        return self._forward_mlp(xv, p)

    def _forward_conv(self, xv: Variable, p: dict[str, Variable], mode: str) -> Variable:
        cfg = self.cfg
        B = xv.shape[0]
        c, h, w = cfg.in_shape
        out = T.permute(T.reshape(xv, (B, c, h, w)), (0, 2, 3, 1))  # rows are (c,h,w) order
        for i in range(cfg.depth):
            out = T.conv2d(out, p[f"conv{i}.w"], p[f"conv{i}.b"])
            if cfg.norm == "batch_norm":
                out = T.batch_norm(
                    out,
                    p[f"bn{i}.gamma"],
                    p[f"bn{i}.beta"],
                    self.buffers[f"bn{i}.mean"],
                    self.buffers[f"bn{i}.var"],
                    mode,
                    (0, 1, 2),
                    eps=cfg.bn_eps,
                    momentum=cfg.bn_momentum,
                )
            out = T.relu(out)
            out = T.avg_pool2(out)
        return T.reshape(out, (B, cfg.feature_dim))

    def _forward_mlp(self, xv: Variable, p: dict[str, Variable]) -> Variable:
        n_layers = len(self.cfg.hidden) + 1
        out = xv
        for i in range(n_layers):
            out = T.matmul(out, p[f"fc{i}.w"]) + p[f"fc{i}.b"]
            if i < n_layers - 1:
                out = T.relu(out)
        return out

    # -- persistence ---------------------------------------------------------

    def save(self, path, extra_state: dict | None = None) -> Path:
        arrays = {f"param.{k}": v for k, v in self.params.items()}
        arrays.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        state = {
            "config": self.cfg.to_dict(),
            "frozen": self.frozen,
            "params": sorted(self.params),
            "buffers": sorted(self.buffers),
        }
        if extra_state:
            state.update(extra_state)
        return bundle.save_tree(path, arrays, state)

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        arrays, state = bundle.load_tree(path)
        cfg = config_from_dict(state["config"])
        params = {k: arrays[f"param.{k}"] for k in state["params"]}
        buffers = {k: arrays[f"buffer.{k}"] for k in state["buffers"]}
        return cls(cfg, params, buffers, frozen=bool(state.get("frozen", False)))


def init_head(rng: RngState, feature_dim: int, out_dim: int, dtype, zero: bool = False) -> np.ndarray:
    """Linear head (feature_dim, out_dim), He init by default."""
    dt = T.dtype_of(dtype) if isinstance(dtype, str) else dtype
    if zero:
        return np.zeros((feature_dim, out_dim), dtype=dt)
    return he_normal(rng, (feature_dim, out_dim), feature_dim, dt)


def forward_head(features: Variable, head: Variable | np.ndarray) -> Variable:
    hv = head if isinstance(head, Variable) else T.constant(head)
    if features.shape[1] != hv.shape[0]:
        raise DimensionError(
            f"head expects features of dim {hv.shape[0]}, got {features.shape}"
        )
    return T.matmul(features, hv)
