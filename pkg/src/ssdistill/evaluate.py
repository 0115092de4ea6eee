"""Downstream evaluation of a distilled set.

The protocol: pre-train a fresh backbone on the distilled pairs by plain
regression onto Y_s, then measure how well that backbone transfers to the
labeled tasks, against (a) training from scratch and (b) pre-training on a
random real subset with its target embeddings. A knowledge-distillation path
trains a student to match a supervised teacher's soft predictions using only
the distilled inputs; following how such students are trained, batch
statistics are used in both networks at every point, including evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

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
from .data import TransferTask
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .models import ConvNetConfig, FeatureExtractor, forward_head, init_head
from .ssl import AugmentConfig, augment_batch, normalize_rows


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(f"labels outside [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(p_targets: np.ndarray, logits: T.Variable) -> T.Variable:
    """Mean over rows of -sum_c p_c log softmax(logits)_c."""
    if p_targets.shape != logits.shape:
        raise ContractError(f"target probs {p_targets.shape} vs logits {logits.shape}")
    logq = T.log_softmax(logits)
    n = p_targets.shape[0]
    return T.constant(-1.0 / n, logits.dtype) * T.sum_(T.constant(p_targets, logits.dtype) * logq)


def softmax_value(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def kl_divergence_value(p: np.ndarray, q: np.ndarray, eps: float = 1e-12) -> float:
    """Mean over rows of sum_c p log(p/q)."""
    p = np.clip(p, eps, None)
    q = np.clip(q, eps, None)
    return float((p * (np.log(p) - np.log(q))).sum(axis=1).mean())


# -- pretraining on the distilled set ------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 1000
    batch_size: int = 256  # clipped to the distilled size
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("pretrain needs epochs >= 1 and batch_size >= 2")


def pretrain_on_distilled(
    rng: RngState,
    xs: np.ndarray,
    ys: np.ndarray,
    arch: ConvNetConfig,
    cfg: PretrainConfig | None = None,
) -> tuple[FeatureExtractor, np.ndarray, list[dict]]:
    """Train a fresh backbone + linear head to regress Y_s from X_s.

    Returns (extractor, head, per-epoch loss trace). The loss is
    0.5 * mean squared error, the optimizer the same SGD recipe the pool
    models use, constant rate.
    """
    cfg = cfg or PretrainConfig()
    cfg.validate()
    arch.validate()
    m = xs.shape[0]
    if ys.shape[0] != m:
        raise ContractError(f"{m} inputs vs {ys.shape[0]} targets")
    net = FeatureExtractor.init(rng, arch)
    head = init_head(rng, arch.feature_dim, ys.shape[1], arch.dtype)
    params = dict(net.params)
    params["head.w"] = head
    opt = SgdState.init(
        SgdConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay), params
    )
    bs = min(cfg.batch_size, m)
    trace: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(m)
        losses = []
        for lo in range(0, m - bs + 1, bs):
            idx = order[lo : lo + bs]
            pvars = {k: T.leaf(v, requires_grad=True) for k, v in params.items()}
            try:
                feats = net.forward(
                    xs[idx], mode="train",
                    param_vars={k: v for k, v in pvars.items() if k != "head.w"},
                )
                pred = forward_head(feats, pvars["head.w"])
                err = T.constant(ys[idx], pred.dtype) - pred
                loss = T.constant(0.5 / err.value.size, pred.dtype) * T.sum_(T.square(err))
                grads = T.backward(loss, wrt=list(pvars.values()))
            except NumericError as e:
                raise TrainingError(f"pretraining diverged in epoch {epoch}: {e}") from e
            gd = {k: T.grad_of(grads, v) for k, v in pvars.items()}
            params = sgd_step(params, gd, opt)
            losses.append(loss.item())
        trace.append({"epoch": epoch, "loss": float(np.mean(losses))})
    head = params.pop("head.w")
    net.params = params
    return net, head, trace


# -- supervised transfer ---------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    eval_batch: int = 256
    augment: bool = True  # pad-crop + flip on train batches

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 2 or self.eval_batch < 1:
            raise ConfigError("batch_size must be >= 2 and eval_batch >= 1")


@dataclass
class ClassifierResult:
    accuracy: float
    extractor: FeatureExtractor
    head: np.ndarray
    trace: list[dict]


def evaluate_accuracy(
    extractor: FeatureExtractor,
    head: np.ndarray,
    X_norm: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 256,
    mode: str = "eval",
) -> float:
    """Top-1 accuracy, batched. Eval mode by default; batch_stats mode exists
    for the distillation-trained students that never learn running stats."""
    correct = 0
    n = X_norm.shape[0]
    for lo in range(0, n, batch_size):
        chunk = X_norm[lo : lo + batch_size]
        if mode == "batch_stats" and chunk.shape[0] < 2:
            mode_here = "eval"
        else:
            mode_here = mode
        logits = forward_head(extractor.forward(chunk, mode=mode_here), head).value
        correct += int((np.argmax(logits, axis=1) == labels[lo : lo + batch_size]).sum())
    return correct / n


def finetune(
    rng: RngState,
    extractor: FeatureExtractor,
    task: TransferTask,
    cfg: FinetuneConfig | None = None,
    head_init: np.ndarray | None = None,
    train_extractor: bool = True,
) -> ClassifierResult:
    """Fine-tune a copy of the extractor plus a fresh head on the task's
    train split; returns test accuracy. With train_extractor=False only the
    head trains (linear probing on frozen features).

    head_init, when given, seeds the head instead of a fresh draw; training
    is equivariant to consistent label/head-column permutations, which the
    tests exploit.
    """
    cfg = cfg or FinetuneConfig()
    cfg.validate()
    net = extractor.copy()
    x_test = normalize_rows(task.test.x, task.mean, task.std, task.image_shape)
    n, c = task.train.x.shape[0], task.n_classes
    targets = one_hot(task.train.labels, c)
    aug = AugmentConfig(brightness=0.0, contrast=0.0) if cfg.augment else None
    if aug is None:
        x_train = normalize_rows(task.train.x, task.mean, task.std, task.image_shape)
    if head_init is not None:
        if head_init.shape != (net.feature_dim, c):
            raise ContractError(
                f"head_init {head_init.shape} vs expected {(net.feature_dim, c)}"
            )
        head = head_init.copy()
    else:
        head = init_head(rng, net.feature_dim, c, net.cfg.dtype)

    params = {"head.w": head}
    if train_extractor:
        params.update(net.params)
    opt = SgdState.init(
        SgdConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay), params
    )
    bs = min(cfg.batch_size, n)
    trace: list[dict] = []
    for step in range(cfg.steps):
        idx = rng.choice(n, bs)
        if aug is not None:
            raw = augment_batch(rng, task.train.x[idx], task.image_shape, aug)
            xb = normalize_rows(raw, task.mean, task.std, task.image_shape)
        else:
            xb = x_train[idx]
        pvars = {k: T.leaf(v, requires_grad=True) for k, v in params.items()}
        try:
            if train_extractor:
                feats = net.forward(
                    xb, mode="train",
                    param_vars={k: v for k, v in pvars.items() if k != "head.w"},
                )
            else:
                feats = net.forward(xb, mode="eval")
            logits = forward_head(feats, pvars["head.w"])
            loss = cross_entropy(targets[idx], logits)
            grads = T.backward(loss, wrt=list(pvars.values()))
        except NumericError as e:
            raise TrainingError(f"fine-tuning diverged at step {step}: {e}") from e
        gd = {k: T.grad_of(grads, v) for k, v in pvars.items()}
        factor = lr_schedule(cfg.schedule, step, cfg.steps)
        params = sgd_step(params, gd, opt, lr_factor=factor)
        if train_extractor:
            for k in net.params:
                net.params[k] = params[k]
        if step % 100 == 0 or step == cfg.steps - 1:
            trace.append({"step": step, "loss": loss.item()})
    head = params["head.w"]
    acc = evaluate_accuracy(net, head, x_test, task.test.labels, cfg.eval_batch)
    return ClassifierResult(accuracy=acc, extractor=net, head=head, trace=trace)


def linear_probe(
    rng: RngState,
    extractor: FeatureExtractor,
    task: TransferTask,
    cfg: FinetuneConfig | None = None,
    head_init: np.ndarray | None = None,
) -> ClassifierResult:
    return finetune(rng, extractor, task, cfg, head_init=head_init, train_extractor=False)


def train_from_scratch(
    rng: RngState, arch: ConvNetConfig, task: TransferTask, cfg: FinetuneConfig | None = None
) -> ClassifierResult:
    """The no-pretraining arm, and also how the distillation teacher is made:
    a freshly initialized backbone fine-tuned end to end."""
    net = FeatureExtractor.init(rng, arch)
    return finetune(rng, net, task, cfg)


def random_subset_pairs(
    rng: RngState, Xt: np.ndarray, embeds: np.ndarray, m: int
) -> tuple[np.ndarray, np.ndarray]:
    """The random-real-subset baseline: m source rows with their embeddings."""
    if not 2 <= m <= Xt.shape[0]:
        raise ContractError(f"need 2 <= m <= {Xt.shape[0]}, got {m}")
    idx = rng.choice(Xt.shape[0], m)
    return Xt[idx].copy(), embeds[idx].copy()


# -- knowledge distillation -------------------------------------------------------------


@dataclass(frozen=True)
class KdConfig:
    epochs: int = 1000
    batch_size: int = 512  # clipped to the distilled size
    lr: float = 1e-4
    weight_decay: float = 0.0
    eval_batch: int = 256

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("kd needs epochs >= 1 and batch_size >= 2")


@dataclass
class KdResult:
    extractor: FeatureExtractor
    head: np.ndarray
    kl_trace: list[dict]  # per-epoch mean KL(teacher || student)


def kd_finetune(
    rng: RngState,
    student: FeatureExtractor,
    teacher: ClassifierResult,
    xs: np.ndarray,
    n_classes: int,
    cfg: KdConfig | None = None,
) -> KdResult:
    """Drive a student to match the teacher's soft labels on the distilled
    inputs. Both networks run on batch statistics throughout, the student
    because its pretraining never visited real data, the teacher to match.
    """
    cfg = cfg or KdConfig()
    cfg.validate()
    net = student.copy()
    head = init_head(rng, net.feature_dim, n_classes, net.cfg.dtype)
    params = dict(net.params)
    params["head.w"] = head
    opt = AdamwState.init(AdamwConfig(lr=cfg.lr, weight_decay=cfg.weight_decay), params)
    m = xs.shape[0]
    bs = min(cfg.batch_size, m)
    kl_trace: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(m)
        kls = []
        for lo in range(0, m - bs + 1, bs):
            idx = order[lo : lo + bs]
            batch = xs[idx]
            t_logits = forward_head(
                teacher.extractor.forward(batch, mode="batch_stats"), teacher.head
            ).value
            t_probs = softmax_value(t_logits)
            pvars = {k: T.leaf(v, requires_grad=True) for k, v in params.items()}
            try:
                feats = net.forward(
                    batch, mode="batch_stats",
                    param_vars={k: v for k, v in pvars.items() if k != "head.w"},
                )
                logits = forward_head(feats, pvars["head.w"])
                loss = cross_entropy(t_probs, logits)
                grads = T.backward(loss, wrt=list(pvars.values()))
            except NumericError as e:
                raise TrainingError(f"distillation to the teacher diverged at epoch {epoch}: {e}") from e
            gd = {k: T.grad_of(grads, v) for k, v in pvars.items()}
            params = adamw_step(params, gd, opt)
            for k in net.params:
                net.params[k] = params[k]
            kls.append(kl_divergence_value(t_probs, softmax_value(logits.value)))
        kl_trace.append({"epoch": epoch, "kl": float(np.mean(kls))})
    head = params["head.w"]
    return KdResult(extractor=net, head=head, kl_trace=kl_trace)


def evaluate_kd_student(
    result: KdResult, task: TransferTask, eval_batch: int = 256
) -> float:
    """Student accuracy on the task's test split, batch statistics at test
    time as in training."""
    x_test = normalize_rows(task.test.x, task.mean, task.std, task.image_shape)
    return evaluate_accuracy(
        result.extractor, result.head, x_test, task.test.labels, eval_batch, mode="batch_stats"
    )
