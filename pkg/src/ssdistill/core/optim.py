"""SGD with momentum and AdamW over named parameter dicts.

Optimizer state lives beside the parameters as plain ndarray dicts so a
checkpoint is just "save every array". Steps are pure-ish: they mutate the
state object and return a new params dict, never touching the inputs'
aliasing assumptions (each updated array is freshly allocated).

Learning-rate schedules are externalized: a step takes an `lr_factor` in
[0, 1] that scales the gradient-driven part of the update. For AdamW the
weight-decay term deliberately uses the unscaled base rate, so a factor of
zero still decays weights. SGD folds weight decay into the velocity (the
classic L2 formulation), which matches how the inner models are trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ContractError

ParamDict = dict[str, np.ndarray]


def _check_match(params: ParamDict, grads: ParamDict, who: str) -> None:
    if params.keys() != grads.keys():
        missing = sorted(set(params) ^ set(grads))
        raise ContractError(f"{who}: params/grads key mismatch: {missing}")
    for k in params:
        if params[k].shape != grads[k].shape:
            raise ContractError(
                f"{who}: shape mismatch for {k!r}: {params[k].shape} vs {grads[k].shape}"
            )


@dataclass
class SgdConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError(f"sgd lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"sgd momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"sgd weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class SgdState:
    cfg: SgdConfig
    velocity: ParamDict = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def init(cls, cfg: SgdConfig, params: ParamDict) -> "SgdState":
        cfg.validate()
        vel = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(cfg=cfg, velocity=vel)


def sgd_step(params: ParamDict, grads: ParamDict, state: SgdState, lr_factor: float = 1.0) -> ParamDict:
    """v <- momentum*v + grad + wd*param; param <- param - lr*lr_factor*v."""
    _check_match(params, grads, "sgd_step")
    cfg = state.cfg
    out: ParamDict = {}
    for k, p in params.items():
        v = state.velocity[k]
        v = cfg.momentum * v + grads[k] + cfg.weight_decay * p
        state.velocity[k] = v
        out[k] = p - (cfg.lr * lr_factor) * v
    state.step_count += 1
    return out


@dataclass
class AdamwConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError(f"adamw lr must be >= 0, got {self.lr}")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"adamw {name} must lie in [0, 1), got {b}")
        if self.eps <= 0:
            raise ConfigError(f"adamw eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"adamw weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class AdamwState:
    cfg: AdamwConfig
    m: ParamDict = field(default_factory=dict)
    v: ParamDict = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def init(cls, cfg: AdamwConfig, params: ParamDict) -> "AdamwState":
        cfg.validate()
        return cls(
            cfg=cfg,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_step(params: ParamDict, grads: ParamDict, state: AdamwState, lr_factor: float = 1.0) -> ParamDict:
    """Bias-corrected Adam step scaled by lr_factor, plus decoupled weight
    decay at the unscheduled base rate (factor 0 still shrinks weights)."""
    _check_match(params, grads, "adamw_step")
    cfg = state.cfg
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    out: ParamDict = {}
    for k, p in params.items():
        g = grads[k]
        m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * (g * g)
        state.m[k] = m
        state.v[k] = v
        step = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        out[k] = p - (cfg.lr * lr_factor) * step - (cfg.lr * cfg.weight_decay) * p
    return out


def lr_schedule(kind: str, step: int, total: int) -> float:
    """Multiplicative factor for the step about to be taken (step in [0, total)).

    "constant" -> 1; "linear_decay" -> 1 - step/total; "cosine" -> the half
    cosine from 1 down to 0.
    """
    if total <= 0:
        raise ConfigError(f"schedule total must be > 0, got {total}")
    if not 0 <= step <= total:
        raise ContractError(f"schedule step {step} outside [0, {total}]")
    if kind == "constant":
        return 1.0
    if kind == "linear_decay":
        return 1.0 - step / total
    if kind == "cosine":
        return 0.5 * (1.0 + float(np.cos(np.pi * step / total)))
    raise ConfigError(f"unknown schedule kind {kind!r}")
