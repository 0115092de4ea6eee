"""Synthetic image suite: an unlabeled source set plus two labeled tasks.

Every image is one soft-edged geometric figure on a tinted noisy background.
The generative factors are figure kind, hue, position, size, background tint
and pixel noise. The two downstream tasks read out different factors of the
same distribution: task "shapes" labels the figure kind, task "hues" labels
the hue quadrant. Position, size, tint and noise are nuisance everywhere,
which is what makes a handful of labeled examples hard to learn from raw
pixels and makes transferred features earn their keep.

Images are (3, H, W) float rows in [0, 1]; labels are int64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core.rng import RngState
from .errors import ConfigError, ContractError

N_KINDS = 4  # square, circle, diamond, cross
N_HUE_BUCKETS = 6


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 16
    n_source: int = 2048
    n_train: int = 256
    n_test: int = 512
    noise: float = 0.03
    min_radius: float = 0.23  # fraction of image size
    max_radius: float = 0.37
    jitter: float = 0.15  # max center offset from middle, fraction of size
    tint: float = 0.12  # background tint range per channel
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 8 or self.image_size & (self.image_size - 1):
            raise ConfigError(
                f"image_size must be a power of two >= 8, got {self.image_size}"
            )
        if min(self.n_source, self.n_train, self.n_test) < 8:
            raise ConfigError("dataset sizes must be >= 8")
        if not 0 < self.min_radius <= self.max_radius < 0.5:
            raise ConfigError("need 0 < min_radius <= max_radius < 0.5")
        if self.noise < 0 or self.jitter < 0 or self.tint < 0:
            raise ConfigError("noise, jitter and tint must be >= 0")


@dataclass
class LabeledDataset:
    x: np.ndarray  # (n, 3*H*W) raw rows in [0,1]
    labels: np.ndarray  # (n,) int64 in [0, n_classes)
    n_classes: int

    def validate(self) -> None:
        if self.x.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"{self.x.shape[0]} rows but {self.labels.shape[0]} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ContractError(f"labels outside [0, {self.n_classes})")


@dataclass
class TransferTask:
    name: str
    train: LabeledDataset
    test: LabeledDataset
    mean: np.ndarray  # per-channel stats of the task's train split
    std: np.ndarray
    image_shape: tuple[int, int, int] = (3, 16, 16)

    @property
    def n_classes(self) -> int:
        return self.train.n_classes


@dataclass
class SourceSet:
    x: np.ndarray  # (n, 3*H*W) raw rows
    mean: np.ndarray
    std: np.ndarray
    image_shape: tuple[int, int, int]


def _hue_to_rgb(h: np.ndarray, v: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Hue in [0,1) to rgb; v is the peak channel level, p the floor level
    (so v - p plays the role of saturation). All per sample, vectorized."""
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int)
    f = h6 - i
    q = v - (v - p) * f
    t = p + (v - p) * f
    table = np.stack(
        [
            np.stack([v, t, p], -1),
            np.stack([q, v, p], -1),
            np.stack([p, v, t], -1),
            np.stack([p, q, v], -1),
            np.stack([t, p, v], -1),
            np.stack([v, p, q], -1),
        ]
    )
    return table[i % 6, np.arange(h.shape[0])]


def _figure_mask(kind: np.ndarray, cx, cy, r, size: int) -> np.ndarray:
    """Soft masks (n, size, size) from signed distances, one figure each."""
    g = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(g, g, indexing="ij")
    dx = xx[None] - cx[:, None, None]
    dy = yy[None] - cy[:, None, None]
    rr = r[:, None, None]
    ax, ay = np.abs(dx), np.abs(dy)
    sd_square = np.maximum(ax, ay) - rr
    sd_circle = np.sqrt(dx * dx + dy * dy) - rr
    sd_diamond = (ax + ay) - 1.2 * rr
    bar = 0.38 * rr
    sd_cross = np.minimum(np.maximum(ax - rr, ay - bar), np.maximum(ay - rr, ax - bar))
    sd = np.choose(kind[:, None, None], [sd_square, sd_circle, sd_diamond, sd_cross])
    softness = 0.6 / size
    return 1.0 / (1.0 + np.exp(np.clip(sd / softness, -30.0, 30.0)))


def _render(rng: RngState, kinds: np.ndarray, hues: np.ndarray, cfg: GenConfig) -> np.ndarray:
    n = kinds.shape[0]
    s = cfg.image_size
    cx = 0.5 + rng.uniform((n,), -cfg.jitter, cfg.jitter)
    cy = 0.5 + rng.uniform((n,), -cfg.jitter, cfg.jitter)
    r = rng.uniform((n,), cfg.min_radius, cfg.max_radius)
    mask = _figure_mask(kinds, cx, cy, r, s)  # (n, s, s)
    # figure brightness and saturation vary per image so that mean color
    # alone is a weak cue for the hue task
    fig_v = rng.uniform((n,), 0.65, 0.95)
    fig_p = rng.uniform((n,), 0.05, 0.4)
    fg = _hue_to_rgb(hues, fig_v, fig_p)  # (n, 3)
    bg_level = rng.uniform((n,), 0.15, 0.45)
    bg_tint = rng.uniform((n, 3), -cfg.tint, cfg.tint)
    bg = np.clip(bg_level[:, None] + bg_tint, 0.0, 1.0)  # (n, 3)
    img = bg[:, :, None, None] + mask[:, None, :, :] * (fg[:, :, None, None] - bg[:, :, None, None])

    # a smaller distractor figure of independent kind and hue, placed across
    # the image center from the main figure; both labels refer to the main
    # figure, so nothing can be read off global color averages alone
    d_kind = np.floor(rng.uniform((n,), 0, N_KINDS)).astype(np.int64)
    d_hue = rng.uniform((n,))
    d_r = r * rng.uniform((n,), 0.45, 0.62)
    d_cx = np.clip(1.0 - cx + rng.uniform((n,), -0.05, 0.05), 0.12, 0.88)
    d_cy = np.clip(1.0 - cy + rng.uniform((n,), -0.05, 0.05), 0.12, 0.88)
    d_mask = _figure_mask(d_kind, d_cx, d_cy, d_r, s)
    d_v = rng.uniform((n,), 0.7, 0.95)
    d_p = rng.uniform((n,), 0.05, 0.3)
    d_fg = _hue_to_rgb(d_hue, d_v, d_p)
    # distractor sits behind the main figure: only its unoccluded part shows
    d_mask = d_mask * (1.0 - mask)
    img = img + d_mask[:, None, :, :] * (d_fg[:, :, None, None] - img)

    if cfg.noise > 0:
        img = img + rng.normal((n, 3, s, s), std=cfg.noise)
    np.clip(img, 0.0, 1.0, out=img)
    return np.ascontiguousarray(img.reshape(n, 3 * s * s))


def _balanced(rng: RngState, n: int, k: int) -> np.ndarray:
    """n labels over k classes, as balanced as n allows, in shuffled order."""
    base = np.arange(n) % k
    return base[rng.permutation(n)]


def _sample_batch(rng: RngState, n: int, cfg: GenConfig):
    """Factors for n images: balanced kinds, balanced hue buckets, both
    shuffled independently so the two label semantics are unrelated."""
    kinds = _balanced(rng, n, N_KINDS)
    buckets = _balanced(rng, n, N_HUE_BUCKETS)
    # hue sits strictly inside its bucket, but runs close enough to the
    # boundaries that the class edges take many samples to pin down
    hues = (buckets + 0.02 + 0.96 * rng.uniform((n,))) / N_HUE_BUCKETS
    return kinds, hues, buckets


def channel_stats(x: np.ndarray, image_shape) -> tuple[np.ndarray, np.ndarray]:
    c, h, w = image_shape
    per_channel = x.reshape(-1, c, h * w)
    mean = per_channel.mean(axis=(0, 2))
    std = per_channel.std(axis=(0, 2))
    return mean, np.maximum(std, 1e-6)


def generate_suite(cfg: GenConfig) -> tuple[SourceSet, TransferTask, TransferTask]:
    """The full benchmark: unlabeled source plus the two labeled tasks.

    A single rng stream drives everything, so one seed pins every pixel.
    """
    cfg.validate()
    rng = RngState(cfg.seed)
    shape = (3, cfg.image_size, cfg.image_size)

    kinds, hues, _ = _sample_batch(rng, cfg.n_source, cfg)
    src_x = _render(rng, kinds, hues, cfg)
    mean, std = channel_stats(src_x, shape)
    source = SourceSet(x=src_x, mean=mean, std=std, image_shape=shape)

    tasks = []
    for label_kind in ("shapes", "hues"):
        splits = []
        for n in (cfg.n_train, cfg.n_test):
            kinds, hues, buckets = _sample_batch(rng, n, cfg)
            x = _render(rng, kinds, hues, cfg)
            if label_kind == "shapes":
                labels, k = kinds, N_KINDS
            else:
                labels, k = buckets, N_HUE_BUCKETS
            ds = LabeledDataset(x=x, labels=labels.astype(np.int64), n_classes=k)
            ds.validate()
            splits.append(ds)
        t_mean, t_std = channel_stats(splits[0].x, shape)
        tasks.append(
            TransferTask(
                name=label_kind,
                train=splits[0],
                test=splits[1],
                mean=t_mean,
                std=t_std,
                image_shape=shape,
            )
        )
    return source, tasks[0], tasks[1]
