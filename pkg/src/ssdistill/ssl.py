"""Self-supervised target model: augmentations, loss, training, embeddings.

The target model is a backbone plus MLP projector trained with the
redundancy-reduction objective: embed two augmented views of each batch,
normalize every embedding dimension across the batch, and push the
cross-correlation matrix toward identity (diagonal to one, off-diagonal to
zero with weight `lam`). After training the model is frozen; downstream code
only ever asks it for embeddings.

Images travel as flattened (channel, height, width) rows with values in
[0, 1]; augmentation happens in that raw space and normalization by the
dataset channel statistics happens right before the backbone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import tensor as T
from .core.optim import SgdConfig, SgdState, lr_schedule, sgd_step
from .core.rng import RngState
from .core.tensor import Variable
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError, TrainingError
from .models import ConvNetConfig, FeatureExtractor, MlpConfig, config_from_dict

EMBED_MODES = ("backbone_features", "projector_output")


# -- image-space helpers -----------------------------------------------------------


def normalize_rows(X: np.ndarray, mean, std, image_shape) -> np.ndarray:
    """(x - mean_c) / std_c per channel on flattened (c,h,w) rows."""
    c, h, w = image_shape
    mean = np.asarray(mean, dtype=X.dtype).reshape(1, c, 1)
    std = np.asarray(std, dtype=X.dtype).reshape(1, c, 1)
    if np.any(std <= 0):
        raise ContractError(f"channel std must be positive, got {std.ravel()}")
    out = (X.reshape(-1, c, h * w) - mean) / std
    return np.ascontiguousarray(out.reshape(X.shape[0], c * h * w))


def denormalize_rows(X: np.ndarray, mean, std, image_shape) -> np.ndarray:
    c, h, w = image_shape
    mean = np.asarray(mean, dtype=X.dtype).reshape(1, c, 1)
    std = np.asarray(std, dtype=X.dtype).reshape(1, c, 1)
    out = X.reshape(-1, c, h * w) * std + mean
    return np.ascontiguousarray(out.reshape(X.shape[0], c * h * w))


@dataclass(frozen=True)
class AugmentConfig:
    pad: int = 2
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2

    def validate(self) -> None:
        if self.pad < 0:
            raise ConfigError(f"augment pad must be >= 0, got {self.pad}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0,1], got {self.flip_prob}")
        if self.brightness < 0 or self.contrast < 0:
            raise ConfigError("brightness/contrast strengths must be >= 0")


def augment_batch(rng: RngState, X: np.ndarray, image_shape, cfg: AugmentConfig) -> np.ndarray:
    """One augmented view of raw [0,1] rows: pad-crop shift, horizontal flip,
    brightness offset, contrast scaling, then clip back to [0,1].

    Per-image parameters come from `rng` in a fixed order (crop offsets,
    flips, brightness, contrast), so a saved rng state replays the exact view.
    """
    c, h, w = image_shape
    B = X.shape[0]
    if X.shape[1] != c * h * w:
        raise DimensionError(f"augment: rows of {X.shape[1]} values, expected {c * h * w}")
    imgs = X.reshape(B, c, h, w).copy()
    p = cfg.pad
    if p > 0:
        padded = np.pad(imgs, ((0, 0), (0, 0), (p, p), (p, p)))
        oy = np.floor(rng.uniform((B,)) * (2 * p + 1)).astype(int)
        ox = np.floor(rng.uniform((B,)) * (2 * p + 1)).astype(int)
        for n in range(B):
            imgs[n] = padded[n, :, oy[n] : oy[n] + h, ox[n] : ox[n] + w]
    flips = rng.bernoulli(cfg.flip_prob, (B,))
    imgs[flips] = imgs[flips, :, :, ::-1]
    if cfg.brightness > 0:
        delta = rng.uniform((B,), -cfg.brightness, cfg.brightness)
        imgs += delta[:, None, None, None]
    if cfg.contrast > 0:
        factor = rng.uniform((B,), 1.0 - cfg.contrast, 1.0 + cfg.contrast)
        m = imgs.mean(axis=(1, 2, 3), keepdims=True)
        imgs = m + factor[:, None, None, None] * (imgs - m)
    np.clip(imgs, 0.0, 1.0, out=imgs)
    return np.ascontiguousarray(imgs.reshape(B, c * h * w))


def augment_two_views(rng: RngState, X: np.ndarray, image_shape, cfg: AugmentConfig):
    """Two independently augmented views of the same batch."""
    return augment_batch(rng, X, image_shape, cfg), augment_batch(rng, X, image_shape, cfg)


# -- loss ---------------------------------------------------------------------------


def _column_standardize(z: Variable, eps: float = 1e-12) -> Variable:
    mu = T.mean_(z, axis=0, keepdims=True)
    var = T.mean_(T.square(z - mu), axis=0, keepdims=True)  # biased, matches oracle
    return (z - mu) / T.sqrt(var + T.constant(eps, z.dtype))


def barlow_twins_loss(za: Variable, zb: Variable, lam: float) -> Variable:
    """sum_d (1 - C_dd)^2 + lam * sum_{i != j} C_ij^2 for the cross-correlation
    C of batch-standardized embeddings."""
    if za.shape != zb.shape:
        raise DimensionError(f"views disagree: {za.shape} vs {zb.shape}")
    n, d = za.shape
    if n < 2:
        raise ContractError(f"redundancy-reduction loss needs a batch of >= 2, got {n}")
    a = _column_standardize(za)
    b = _column_standardize(zb)
    C = T.matmul(T.transpose(a), b) * T.constant(1.0 / n, za.dtype)
    eye = T.constant(np.eye(d, dtype=za.value.dtype))
    on_diag = T.sum_(T.square(eye - C) * eye)
    off_diag = T.sum_(T.square(C) * (T.constant(1.0, za.dtype) - eye))
    return on_diag + T.constant(float(lam), za.dtype) * off_diag


# -- target model ----------------------------------------------------------------------


@dataclass(frozen=True)
class TargetTrainerConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 5e-3
    projector_hidden: tuple[int, ...] = (128,)
    embed_dim: int = 64
    embed_mode: str = "backbone_features"
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("target trainer needs epochs >= 1 and batch_size >= 2")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.embed_mode not in EMBED_MODES:
            raise ConfigError(f"embed_mode must be one of {EMBED_MODES}, got {self.embed_mode!r}")
        self.augment.validate()


class TargetModel:
    """Frozen backbone + projector with the stats used to normalize inputs."""

    def __init__(self, backbone: FeatureExtractor, projector: FeatureExtractor, embed_mode: str, mean, std):
        if embed_mode not in EMBED_MODES:
            raise ContractError(f"embed_mode must be one of {EMBED_MODES}, got {embed_mode!r}")
        self.backbone = backbone
        self.projector = projector
        self.embed_mode = embed_mode
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @property
    def embed_dim(self) -> int:
        if self.embed_mode == "backbone_features":
            return self.backbone.feature_dim
        return self.projector.feature_dim

    @property
    def image_shape(self):
        return self.backbone.cfg.in_shape

    def embed(self, X_raw: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Embeddings for raw [0,1] rows in eval mode, batched. The output is
        independent of batch_size because eval mode never couples rows."""
        if batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {batch_size}")
        Xn = normalize_rows(X_raw, self.mean, self.std, self.image_shape)
        outs = []
        for lo in range(0, Xn.shape[0], batch_size):
            feats = self.backbone.forward(Xn[lo : lo + batch_size], mode="eval")
            if self.embed_mode == "projector_output":
                feats = self.projector.forward(feats)
            outs.append(feats.value)
        return np.concatenate(outs, axis=0)

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        self.backbone.save(path / "backbone")
        self.projector.save(path / "projector")
        meta = {
            "embed_mode": self.embed_mode,
            "channel_mean": self.mean.tolist(),
            "channel_std": self.std.tolist(),
        }
        (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "TargetModel":
        path = Path(path)
        mpath = path / "meta.json"
        if not mpath.is_file():
            raise FormatError(f"no meta.json under {path}; not a target model checkpoint")
        meta = json.loads(mpath.read_text())
        backbone = FeatureExtractor.load(path / "backbone").freeze()
        projector = FeatureExtractor.load(path / "projector").freeze()
        return cls(backbone, projector, meta["embed_mode"], meta["channel_mean"], meta["channel_std"])


def train_target(
    rng: RngState,
    X_raw: np.ndarray,
    mean,
    std,
    backbone_cfg: ConvNetConfig,
    cfg: TargetTrainerConfig,
) -> tuple[TargetModel, list[dict]]:
    """Train backbone + projector on unlabeled raw rows; returns the frozen
    model and a per-epoch trace of mean loss."""
    cfg.validate()
    backbone_cfg.validate()
    n = X_raw.shape[0]
    if n < cfg.batch_size:
        raise ContractError(f"dataset of {n} rows smaller than batch_size {cfg.batch_size}")
    backbone = FeatureExtractor.init(rng, backbone_cfg)
    proj_cfg = MlpConfig(
        in_dim=backbone_cfg.feature_dim,
        hidden=cfg.projector_hidden,
        feature_dim=cfg.embed_dim,
        dtype=backbone_cfg.dtype,
    )
    projector = FeatureExtractor.init(rng, proj_cfg)

    params = {f"backbone.{k}": v for k, v in backbone.params.items()}
    params.update({f"projector.{k}": v for k, v in projector.params.items()})
    opt = SgdState.init(
        SgdConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay), params
    )
    steps_per_epoch = n // cfg.batch_size
    if steps_per_epoch == 0:
        raise ContractError("no full batch fits the dataset")
    total_steps = cfg.epochs * steps_per_epoch
    image_shape = backbone_cfg.in_shape

    trace: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for bi in range(steps_per_epoch):
            idx = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            va, vb = augment_two_views(rng, X_raw[idx], image_shape, cfg.augment)
            xa = normalize_rows(va, mean, std, image_shape)
            xb = normalize_rows(vb, mean, std, image_shape)
            pvars = {k: T.leaf(v, requires_grad=True) for k, v in params.items()}
            bvars = {k.removeprefix("backbone."): v for k, v in pvars.items() if k.startswith("backbone.")}
            jvars = {k.removeprefix("projector."): v for k, v in pvars.items() if k.startswith("projector.")}
            try:
                za = projector.forward(backbone.forward(xa, mode="train", param_vars=bvars), param_vars=jvars)
                zb = projector.forward(backbone.forward(xb, mode="train", param_vars=bvars), param_vars=jvars)
                loss = barlow_twins_loss(za, zb, cfg.lam)
                grads = T.backward(loss, wrt=list(pvars.values()))
            except NumericError as e:
                raise TrainingError(f"target training hit non-finite values at step {step}: {e}") from e
            gd = {k: T.grad_of(grads, v) for k, v in pvars.items()}
            factor = lr_schedule("cosine", step, total_steps)
            params = sgd_step(params, gd, opt, lr_factor=factor)
            for k in backbone.params:
                backbone.params[k] = params[f"backbone.{k}"]
            for k in projector.params:
                projector.params[k] = params[f"projector.{k}"]
            epoch_losses.append(loss.item())
            step += 1
        trace.append({"epoch": epoch, "loss": float(np.mean(epoch_losses))})
    backbone.freeze()
    projector.freeze()
    model = TargetModel(backbone, projector, cfg.embed_mode, mean, std)
    return model, trace
