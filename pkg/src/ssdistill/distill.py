"""The distillation loop: optimize a small synthetic set against a frozen
self-supervised target.

State is a distilled set (X_s, Y_s) under AdamW with linearly decaying rate,
plus a pool of partially trained models. Each iteration samples a real batch
and one pool entry, takes the kernel-readout meta-gradient of the batch loss
with respect to (X_s, Y_s), applies the meta update, and only then gives the
sampled entry one inner training step on the just-updated distilled pairs
(or a fresh re-initialization once it has hit the inner step budget). The
pool keeps the readout anchored to feature maps of many training ages rather
than one converged network.

The inner objective is the mean squared error (0.5 * mean over entries)
between Y_s and the entry's linear head on its features; mean reduction
keeps the documented inner learning rate stable for any distilled-set size.

Checkpoints capture every array plus the rng counter, so a resumed run is
bit-identical to an uninterrupted one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bundle
from .core import tensor as T
from .core.optim import (
    AdamwConfig,
    AdamwState,
    SgdConfig,
    SgdState,
    adamw_step,
    lr_schedule,
    sgd_step,
)
from .core.rng import RngState
from .errors import ConfigError, ContractError, FormatError, NumericError, TrainingError
from .krr import RidgeConfig, meta_grad
from .models import ConvNetConfig, FeatureExtractor, config_from_dict, forward_head, init_head

YS_INIT_MODES = ("target_embed", "standard_normal")


@dataclass(frozen=True)
class DistillConfig:
    distilled_size: int = 32  # m
    pool_size: int = 4
    inner_steps_max: int = 200  # per-entry budget before reinit
    iterations: int = 5000
    batch_size: int = 64
    meta_lr: float = 1e-3
    meta_weight_decay: float = 0.0
    inner_lr: float = 0.1
    inner_momentum: float = 0.9
    inner_weight_decay: float = 1e-3
    ridge: RidgeConfig = field(default_factory=RidgeConfig)
    ys_init: str = "target_embed"
    seed: int = 0
    arch: ConvNetConfig = field(default_factory=ConvNetConfig)
    checkpoint_every: int = 0  # 0 = only final
    log_every: int = 1

    def validate(self) -> None:
        if self.distilled_size < 2:
            raise ConfigError(f"distilled_size must be >= 2, got {self.distilled_size}")
        if self.pool_size < 1:
            raise ConfigError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.inner_steps_max < 1:
            raise ConfigError(f"inner_steps_max must be >= 1, got {self.inner_steps_max}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.meta_lr < 0 or self.inner_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.ys_init not in YS_INIT_MODES:
            raise ConfigError(f"ys_init must be one of {YS_INIT_MODES}, got {self.ys_init!r}")
        if self.log_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("log_every and checkpoint_every must be >= 0")
        self.ridge.validate()
        self.arch.validate()

    @classmethod
    def paper_scale(cls, **overrides) -> "DistillConfig":
        """The full-scale recipe: larger pool, longer inner budget, long run.
        Desk work should stick to the defaults."""
        base = cls(pool_size=10, inner_steps_max=1000, iterations=160_000)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ridge"] = {"mode": self.ridge.mode, "base": self.ridge.base}
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if "ridge" in d:
            d["ridge"] = RidgeConfig(**d["ridge"])
        if "arch" in d:
            arch = config_from_dict(d["arch"])
            if not isinstance(arch, ConvNetConfig):
                raise ConfigError("distillation pool models must be convnets")
            d["arch"] = arch
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class DistilledSet:
    xs: np.ndarray  # (m, in_dim), normalized image rows
    ys: np.ndarray  # (m, d_y), target-embedding space
    opt: AdamwState
    step: int = 0


@dataclass
class PoolEntry:
    extractor: FeatureExtractor
    head: np.ndarray
    opt: SgdState
    t: int = 0


def _entry_params(entry: PoolEntry) -> dict[str, np.ndarray]:
    params = dict(entry.extractor.params)
    params["head.w"] = entry.head
    return params


def _fresh_entry(rng: RngState, d_y: int, cfg: DistillConfig) -> PoolEntry:
    net = FeatureExtractor.init(rng, cfg.arch)
    head = init_head(rng, cfg.arch.feature_dim, d_y, cfg.arch.dtype)
    entry = PoolEntry(extractor=net, head=head, opt=None, t=0)
    entry.opt = SgdState.init(
        SgdConfig(lr=cfg.inner_lr, momentum=cfg.inner_momentum, weight_decay=cfg.inner_weight_decay),
        _entry_params(entry),
    )
    return entry


def inner_loss_value(entry: PoolEntry, xs: np.ndarray, ys: np.ndarray) -> float:
    feats = entry.extractor.forward(xs, mode="batch_stats")
    pred = forward_head(feats, entry.head)
    return float(0.5 * np.mean((ys - pred.value) ** 2))


def inner_step(entry: PoolEntry, xs: np.ndarray, ys: np.ndarray) -> float:
    """One full-batch step of the entry on the distilled pairs. Train-mode
    forward, so running statistics advance with the entry's age."""
    pvars = {k: T.leaf(v, requires_grad=True) for k, v in entry.extractor.params.items()}
    head_v = T.leaf(entry.head, requires_grad=True)
    try:
        feats = entry.extractor.forward(xs, mode="train", param_vars=pvars)
        pred = forward_head(feats, head_v)
        err = T.constant(ys, pred.dtype) - pred
        loss = T.constant(0.5 / err.value.size, pred.dtype) * T.sum_(T.square(err))
        all_vars = dict(pvars)
        all_vars["head.w"] = head_v
        grads = T.backward(loss, wrt=list(all_vars.values()))
    except NumericError as e:
        raise TrainingError(f"pool model diverged at inner step {entry.t}: {e}") from e
    gd = {k: T.grad_of(grads, v) for k, v in all_vars.items()}
    new = sgd_step(_entry_params(entry), gd, entry.opt)
    entry.head = new.pop("head.w")
    entry.extractor.params = new
    entry.t += 1
    return loss.item()


def init_pool(rng: RngState, xs: np.ndarray, ys: np.ndarray, cfg: DistillConfig) -> list[PoolEntry]:
    """Pool entries at ages drawn uniformly from {1..T}: each starts fresh
    and takes that many inner steps on the initial distilled set."""
    pool = []
    for _ in range(cfg.pool_size):
        age = rng.randint(1, cfg.inner_steps_max + 1)
        entry = _fresh_entry(rng, ys.shape[1], cfg)
        for _ in range(age):
            inner_step(entry, xs, ys)
        pool.append(entry)
    return pool


def reset_entry(rng: RngState, entry: PoolEntry, cfg: DistillConfig) -> None:
    if entry.t < cfg.inner_steps_max:
        raise ContractError(
            f"entry reset requested at age {entry.t} < budget {cfg.inner_steps_max}"
        )
    fresh = _fresh_entry(rng, entry.head.shape[1], cfg)
    entry.extractor = fresh.extractor
    entry.head = fresh.head
    entry.opt = fresh.opt
    entry.t = 0


def init_distilled(
    rng: RngState, Xt: np.ndarray, embeds: np.ndarray, cfg: DistillConfig
) -> DistilledSet:
    """X_s starts as m distinct real rows; Y_s as their embeddings
    (ys_init="target_embed") or as standard normal noise."""
    m = cfg.distilled_size
    idx = rng.choice(Xt.shape[0], m)
    xs = Xt[idx].astype(T.dtype_of(cfg.arch.dtype), copy=True)
    if cfg.ys_init == "target_embed":
        ys = embeds[idx].astype(xs.dtype, copy=True)
    else:
        ys = rng.normal((m, embeds.shape[1])).astype(xs.dtype)
    opt = AdamwState.init(
        AdamwConfig(lr=cfg.meta_lr, weight_decay=cfg.meta_weight_decay),
        {"xs": xs, "ys": ys},
    )
    return DistilledSet(xs=xs, ys=ys, opt=opt, step=0)


def meta_step(
    ds: DistilledSet,
    pool: list[PoolEntry],
    Xt: np.ndarray,
    embeds: np.ndarray,
    rng: RngState,
    cfg: DistillConfig,
) -> dict:
    """One outer iteration. Draw order is fixed (batch indices, then pool
    index); the distilled set updates before the sampled entry trains."""
    idx = rng.choice(Xt.shape[0], cfg.batch_size)
    i = rng.randint(0, cfg.pool_size)
    entry = pool[i]
    mg = meta_grad(entry.extractor, ds.xs, ds.ys, Xt[idx], embeds[idx], cfg.ridge)
    factor = lr_schedule("linear_decay", ds.step, cfg.iterations)
    new = adamw_step(
        {"xs": ds.xs, "ys": ds.ys}, {"xs": mg.gxs, "ys": mg.gys}, ds.opt, lr_factor=factor
    )
    ds.xs, ds.ys = new["xs"], new["ys"]
    ds.step += 1
    reset = False
    if entry.t < cfg.inner_steps_max:
        inner_step(entry, ds.xs, ds.ys)
    else:
        reset_entry(rng, entry, cfg)
        reset = True
    return {
        "step": ds.step - 1,
        "outer_loss": mg.loss,
        "pool_index": i,
        "t": entry.t,
        "lam": mg.lam,
        "lr_factor": factor,
        "reset": reset,
    }


# -- checkpointing -----------------------------------------------------------------


def save_checkpoint(path, ds: DistilledSet, pool: list[PoolEntry], rng: RngState, cfg: DistillConfig) -> Path:
    arrays: dict[str, np.ndarray] = {
        "xs": ds.xs,
        "ys": ds.ys,
        "opt.m.xs": ds.opt.m["xs"],
        "opt.m.ys": ds.opt.m["ys"],
        "opt.v.xs": ds.opt.v["xs"],
        "opt.v.ys": ds.opt.v["ys"],
    }
    pool_state = []
    for j, e in enumerate(pool):
        for k, v in e.extractor.params.items():
            arrays[f"pool{j}.param.{k}"] = v
        for k, v in e.extractor.buffers.items():
            arrays[f"pool{j}.buffer.{k}"] = v
        arrays[f"pool{j}.head"] = e.head
        for k, v in e.opt.velocity.items():
            arrays[f"pool{j}.vel.{k}"] = v
        pool_state.append({"t": e.t, "sgd_steps": e.opt.step_count})
    state = {
        "step": ds.step,
        "opt_steps": ds.opt.step_count,
        "rng": rng.state(),
        "pool": pool_state,
        "config": cfg.to_dict(),
    }
    return bundle.save_tree(path, arrays, state)


def load_checkpoint(path) -> tuple[DistilledSet, list[PoolEntry], RngState, DistillConfig]:
    arrays, state = bundle.load_tree(path)
    cfg = DistillConfig.from_dict(state["config"])
    opt = AdamwState.init(
        AdamwConfig(lr=cfg.meta_lr, weight_decay=cfg.meta_weight_decay),
        {"xs": arrays["xs"], "ys": arrays["ys"]},
    )
    opt.m = {"xs": arrays["opt.m.xs"], "ys": arrays["opt.m.ys"]}
    opt.v = {"xs": arrays["opt.v.xs"], "ys": arrays["opt.v.ys"]}
    opt.step_count = int(state["opt_steps"])
    ds = DistilledSet(xs=arrays["xs"], ys=arrays["ys"], opt=opt, step=int(state["step"]))
    pool = []
    for j, ps in enumerate(state["pool"]):
        params = {}
        buffers = {}
        for k in list(arrays):
            if k.startswith(f"pool{j}.param."):
                params[k.removeprefix(f"pool{j}.param.")] = arrays[k]
            elif k.startswith(f"pool{j}.buffer."):
                buffers[k.removeprefix(f"pool{j}.buffer.")] = arrays[k]
        net = FeatureExtractor(cfg.arch, params, buffers)
        head = arrays[f"pool{j}.head"]
        entry = PoolEntry(extractor=net, head=head, opt=None, t=int(ps["t"]))
        entry.opt = SgdState.init(
            SgdConfig(lr=cfg.inner_lr, momentum=cfg.inner_momentum, weight_decay=cfg.inner_weight_decay),
            _entry_params(entry),
        )
        entry.opt.velocity = {
            k.removeprefix(f"pool{j}.vel."): arrays[k]
            for k in arrays
            if k.startswith(f"pool{j}.vel.")
        }
        entry.opt.step_count = int(ps["sgd_steps"])
        pool.append(entry)
    if not pool:
        raise FormatError(f"checkpoint under {path} holds no pool entries")
    rng = RngState.from_state(state["rng"])
    return ds, pool, rng, cfg


# -- the run -----------------------------------------------------------------------


def run_distillation(
    Xt: np.ndarray,
    embeds: np.ndarray,
    cfg: DistillConfig,
    out_dir=None,
    resume_from=None,
    log_writer=None,
) -> tuple[DistilledSet, list[dict]]:
    """Distill Xt (normalized rows) against its target embeddings.

    Writes checkpoints under out_dir ("ckpt_final" always, "ckpt_<step>"
    every checkpoint_every steps when set) and appends one record per
    log_every steps to log_writer. resume_from continues an interrupted run
    bit-identically.
    """
    cfg.validate()
    n = Xt.shape[0]
    if embeds.shape[0] != n:
        raise ContractError(f"{n} rows but {embeds.shape[0]} embeddings")
    if Xt.shape[1] != cfg.arch.in_dim:
        raise ContractError(f"rows of {Xt.shape[1]} values vs arch input {cfg.arch.in_dim}")
    if n < max(cfg.distilled_size, cfg.batch_size):
        raise ContractError(
            f"dataset of {n} rows cannot supply m={cfg.distilled_size}, b={cfg.batch_size}"
        )
    dt = T.dtype_of(cfg.arch.dtype)
    Xt = Xt.astype(dt, copy=False)
    embeds = embeds.astype(dt, copy=False)

    if resume_from is not None:
        ds, pool, rng, saved_cfg = load_checkpoint(resume_from)
        if saved_cfg.to_dict() != cfg.to_dict():
            raise ContractError("checkpoint config does not match the requested run config")
    else:
        rng = RngState(cfg.seed)
        ds = init_distilled(rng, Xt, embeds, cfg)
        pool = init_pool(rng, ds.xs, ds.ys, cfg)

    records: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    while ds.step < cfg.iterations:
        rec = meta_step(ds, pool, Xt, embeds, rng, cfg)
        if cfg.log_every and (
            rec["step"] % cfg.log_every == 0 or rec["step"] == cfg.iterations - 1
        ):
            records.append(rec)
            if log_writer is not None:
                log_writer.write(rec)
        if out_dir is not None and cfg.checkpoint_every and ds.step % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"ckpt_{ds.step}", ds, pool, rng, cfg)
    if out_dir is not None:
        save_checkpoint(out_dir / "ckpt_final", ds, pool, rng, cfg)
    return ds, records
