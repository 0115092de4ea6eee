"""Command-line shell around the engine.

Every command resolves its configuration (defaults, then an optional JSON
config file, then explicit flags), writes the fully resolved config into
<out>/manifest.json BEFORE any compute, and only then runs. Re-running a
command with --config pointing at a previous manifest reproduces the outputs
bit for bit: nothing here depends on time, host, or environment.

Output is JSON lines on stdout (silence with SSDISTILL_LOG=quiet, extra
detail with SSDISTILL_LOG=debug); training traces go to .jsonl files in the
output directory. Exit codes: 0 success, 2 configuration or usage error,
3 data-format error, 4 numeric or training failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import JsonlWriter, load_bundle, load_tree, save_bundle, save_tree, write_pnm
from .core.rng import RngState
from .data import GenConfig, LabeledDataset, SourceSet, TransferTask, generate_suite
from .distill import DistillConfig, run_distillation
from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    NumericError,
    TrainingError,
)
from .evaluate import (
    ClassifierResult,
    FinetuneConfig,
    KdConfig,
    PretrainConfig,
    finetune,
    kd_finetune,
    evaluate_kd_student,
    pretrain_on_distilled,
    random_subset_pairs,
    train_from_scratch,
)
from .models import ConvNetConfig, FeatureExtractor, config_from_dict
from .ssl import (
    AugmentConfig,
    TargetModel,
    TargetTrainerConfig,
    denormalize_rows,
    normalize_rows,
    train_target,
)
from .biasdemo import (
    bias_estimate,
    designed_instance,
    inner_solution,
    load_instance,
    plain_gradient_control,
)

LOG_ENV = "SSDISTILL_LOG"
_LEVELS = {"quiet": 0, "info": 1, "debug": 2}


def _emit(event: dict, level: str = "info") -> None:
    want = _LEVELS.get(os.environ.get(LOG_ENV, "info"), 1)
    if _LEVELS[level] <= want and want > 0:
        print(json.dumps(event, sort_keys=True), flush=True)


# -- config plumbing --------------------------------------------------------------------


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError(f"config file {path} must hold a JSON object")
    # a previous run's manifest is a valid config source
    if "command" in doc and "config" in doc:
        doc = doc["config"]
    return doc


def _merge(defaults: dict, *layers: dict) -> dict:
    """Nested merge. Later layers win; None means 'not provided'. Keys absent
    from the defaults are rejected so typos fail loudly."""
    out = json.loads(json.dumps(defaults))  # deep copy of plain data
    for layer in layers:
        for key, val in layer.items():
            if val is None:
                continue
            if key not in out:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(out[key], dict) and isinstance(val, dict):
                out[key] = _merge(out[key], val)
            else:
                out[key] = val
    return out


def _write_manifest(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"build": __version__, "command": command, "config": config}
    (out_dir / "manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


# -- dataset persistence ------------------------------------------------------------------


def _save_source(path: Path, source: SourceSet) -> None:
    save_tree(
        path,
        {"x": source.x},
        {
            "kind": "source",
            "mean": source.mean.tolist(),
            "std": source.std.tolist(),
            "image_shape": list(source.image_shape),
        },
    )


def _load_source(path) -> SourceSet:
    arrays, state = load_tree(path)
    if state.get("kind") != "source" or "x" not in arrays:
        raise FormatError(f"{path} is not a source dataset tree")
    return SourceSet(
        x=arrays["x"],
        mean=np.asarray(state["mean"]),
        std=np.asarray(state["std"]),
        image_shape=tuple(state["image_shape"]),
    )


def _save_task(path: Path, task: TransferTask) -> None:
    save_tree(
        path,
        {
            "train_x": task.train.x,
            "train_labels": task.train.labels.astype(np.float64),
            "test_x": task.test.x,
            "test_labels": task.test.labels.astype(np.float64),
        },
        {
            "kind": "task",
            "name": task.name,
            "n_classes": task.n_classes,
            "mean": task.mean.tolist(),
            "std": task.std.tolist(),
            "image_shape": list(task.image_shape),
        },
    )


def _load_task(path) -> TransferTask:
    arrays, state = load_tree(path)
    if state.get("kind") != "task":
        raise FormatError(f"{path} is not a task dataset tree")
    k = state["n_classes"]
    return TransferTask(
        name=state["name"],
        train=LabeledDataset(arrays["train_x"], arrays["train_labels"].astype(np.int64), k),
        test=LabeledDataset(arrays["test_x"], arrays["test_labels"].astype(np.int64), k),
        mean=np.asarray(state["mean"]),
        std=np.asarray(state["std"]),
        image_shape=tuple(state["image_shape"]),
    )


def _load_distilled(path) -> tuple[np.ndarray, np.ndarray, dict]:
    arrays, state = load_tree(path)
    if "xs" not in arrays or "ys" not in arrays:
        raise FormatError(f"{path} does not hold distilled xs/ys arrays")
    return arrays["xs"], arrays["ys"], state


def _arch_from_config(conf: dict, image_shape=None) -> ConvNetConfig:
    d = dict(conf)
    if image_shape is not None:
        d["in_shape"] = list(image_shape)
    arch = config_from_dict(d)
    if not isinstance(arch, ConvNetConfig):
        raise ConfigError("arch must describe a convnet")
    return arch


def _save_classifier(path: Path, extractor: FeatureExtractor, head: np.ndarray, meta: dict) -> None:
    extractor.save(path / "extractor")
    save_bundle(path / "head", head, name="head")
    (path / "result.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load_classifier(path) -> tuple[FeatureExtractor, np.ndarray]:
    p = Path(path)
    extractor = FeatureExtractor.load(p / "extractor")
    head, _ = load_bundle(p / "head")
    return extractor, head


def _write_trace(path: Path, records: list[dict]) -> None:
    w = JsonlWriter(path)
    for rec in records:
        w.write(rec)
    w.close()


# -- commands -----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    defaults = asdict(GenConfig())
    file_cfg = _load_config_file(args.config) if args.config else {}
    flags = {
        k: getattr(args, k)
        for k in defaults
        if getattr(args, k, None) is not None
    }
    conf = _merge(defaults, file_cfg, flags)
    out = Path(args.out)
    _write_manifest(out, "gen-data", conf)
    cfg = GenConfig(**conf)
    source, task_a, task_b = generate_suite(cfg)
    _save_source(out / "source", source)
    _save_task(out / task_a.name, task_a)
    _save_task(out / task_b.name, task_b)
    _emit(
        {
            "event": "gen-data",
            "out": str(out),
            "n_source": int(source.x.shape[0]),
            "tasks": [task_a.name, task_b.name],
        }
    )
    return 0


def _target_defaults() -> dict:
    t = TargetTrainerConfig()
    return {
        "seed": 0,
        "arch": ConvNetConfig().to_dict(),
        "trainer": {
            "epochs": t.epochs,
            "batch_size": t.batch_size,
            "lr": t.lr,
            "momentum": t.momentum,
            "weight_decay": t.weight_decay,
            "lam": t.lam,
            "projector_hidden": list(t.projector_hidden),
            "embed_dim": t.embed_dim,
            "embed_mode": t.embed_mode,
            "augment": asdict(t.augment),
        },
    }


def cmd_train_target(args) -> int:
    defaults = _target_defaults()
    file_cfg = _load_config_file(args.config) if args.config else {}
    flags: dict = {"seed": args.seed, "trainer": {}, "arch": {}}
    for k in ("epochs", "batch_size", "lr", "embed_dim", "embed_mode"):
        flags["trainer"][k] = getattr(args, k)
    if args.projector_hidden is not None:
        flags["trainer"]["projector_hidden"] = [int(v) for v in args.projector_hidden.split(",") if v]
    for k in ("depth", "width", "dtype"):
        flags["arch"][k] = getattr(args, k)
    source = _load_source(args.data)
    conf = _merge(defaults, file_cfg, flags)
    conf["arch"]["in_shape"] = list(source.image_shape)
    out = Path(args.out)
    _write_manifest(out, "train-target", conf)
    arch = _arch_from_config(conf["arch"])
    tconf = dict(conf["trainer"])
    tconf["projector_hidden"] = tuple(tconf["projector_hidden"])
    tconf["augment"] = AugmentConfig(**tconf["augment"])
    tcfg = TargetTrainerConfig(**tconf)
    model, trace = train_target(
        RngState(conf["seed"]), source.x, source.mean, source.std, arch, tcfg
    )
    model.save(out / "model")
    _write_trace(out / "trace.jsonl", trace)
    _emit(
        {
            "event": "train-target",
            "out": str(out),
            "first_loss": trace[0]["loss"],
            "final_loss": trace[-1]["loss"],
        }
    )
    return 0


def cmd_embed(args) -> int:
    conf = _merge({"batch_size": 256}, _load_config_file(args.config) if args.config else {},
                  {"batch_size": args.batch_size})
    out = Path(args.out)
    _write_manifest(out, "embed", conf)
    model = TargetModel.load(Path(args.model))
    source = _load_source(args.data)
    embeds = model.embed(source.x, batch_size=conf["batch_size"])
    save_bundle(out / "embeds", embeds, name="embeds")
    _emit({"event": "embed", "out": str(out), "shape": list(embeds.shape)})
    return 0


def cmd_distill(args) -> int:
    defaults = DistillConfig().to_dict()
    file_cfg = _load_config_file(args.config) if args.config else {}
    flags: dict = {"arch": {}, "ridge": {}}
    for k in (
        "distilled_size", "pool_size", "inner_steps_max", "iterations",
        "batch_size", "meta_lr", "inner_lr", "ys_init", "seed",
        "checkpoint_every", "log_every",
    ):
        flags[k] = getattr(args, k)
    for k in ("depth", "width", "dtype"):
        flags["arch"][k] = getattr(args, k)
    source = _load_source(args.data)
    conf = _merge(defaults, file_cfg, flags)
    conf["arch"]["in_shape"] = list(source.image_shape)
    out = Path(args.out)
    _write_manifest(out, "distill", conf)
    cfg = DistillConfig.from_dict(conf)
    dt = np.float32 if cfg.arch.dtype == "f32" else np.float64
    Xt = normalize_rows(source.x, source.mean, source.std, source.image_shape).astype(dt)
    embeds, _ = load_bundle(Path(args.embeds) / "embeds")
    writer = JsonlWriter(out / "log.jsonl") if cfg.log_every else None
    try:
        dset, records = run_distillation(
            Xt, embeds.astype(dt), cfg, out_dir=out,
            resume_from=args.resume, log_writer=writer,
        )
    finally:
        if writer is not None:
            writer.close()
    save_tree(
        out / "distilled",
        {"xs": dset.xs, "ys": dset.ys},
        {"kind": "distilled", "step": dset.step,
         "mean": source.mean.tolist(), "std": source.std.tolist(),
         "image_shape": list(source.image_shape)},
    )
    event = {"event": "distill", "out": str(out), "steps": dset.step}
    if records:
        event["final_outer_loss"] = records[-1]["outer_loss"]
    _emit(event)
    return 0


def _pretrain_defaults() -> dict:
    p = PretrainConfig()
    return {
        "seed": 0,
        "subset_size": None,
        "arch": ConvNetConfig().to_dict(),
        "pretrain": {
            "epochs": p.epochs,
            "batch_size": p.batch_size,
            "lr": p.lr,
            "momentum": p.momentum,
            "weight_decay": p.weight_decay,
        },
    }


def cmd_pretrain(args) -> int:
    defaults = _pretrain_defaults()
    file_cfg = _load_config_file(args.config) if args.config else {}
    flags: dict = {"seed": args.seed, "pretrain": {"epochs": args.epochs, "lr": args.lr},
                   "arch": {"depth": args.depth, "width": args.width, "dtype": args.dtype}}
    if args.random_subset is not None:
        flags["subset_size"] = args.random_subset
    conf = _merge(defaults, file_cfg, flags)
    if conf["subset_size"] is not None:
        # baseline arm: random real rows with their embeddings
        if not args.data or not args.embeds:
            raise ConfigError("--random-subset needs --data and --embeds")
        source = _load_source(args.data)
        image_shape = source.image_shape
    else:
        if not args.distilled:
            raise ConfigError("pretrain needs --distilled (or --random-subset)")
        xs, ys, state = _load_distilled(args.distilled)
        image_shape = tuple(state["image_shape"])
    conf["arch"]["in_shape"] = list(image_shape)
    out = Path(args.out)
    _write_manifest(out, "pretrain", conf)
    rng = RngState(conf["seed"])
    if conf["subset_size"] is not None:
        embeds, _ = load_bundle(Path(args.embeds) / "embeds")
        Xt = normalize_rows(source.x, source.mean, source.std, image_shape)
        xs, ys = random_subset_pairs(rng, Xt, embeds, int(conf["subset_size"]))
    arch = _arch_from_config(conf["arch"])
    xs = xs.astype(np.float32 if arch.dtype == "f32" else np.float64)
    ys = ys.astype(xs.dtype)
    net, head, trace = pretrain_on_distilled(
        rng, xs, ys, arch, PretrainConfig(**conf["pretrain"])
    )
    net.save(out / "extractor")
    save_bundle(out / "head", head, name="head")
    _write_trace(out / "trace.jsonl", trace)
    _emit({"event": "pretrain", "out": str(out), "final_loss": trace[-1]["loss"]})
    return 0


def _finetune_defaults() -> dict:
    f = FinetuneConfig()
    return {
        "seed": 0,
        "probe": False,
        "arch": ConvNetConfig().to_dict(),
        "finetune": {
            "steps": f.steps,
            "batch_size": f.batch_size,
            "lr": f.lr,
            "momentum": f.momentum,
            "weight_decay": f.weight_decay,
            "schedule": f.schedule,
            "eval_batch": f.eval_batch,
            "augment": f.augment,
        },
    }


def cmd_finetune(args) -> int:
    defaults = _finetune_defaults()
    file_cfg = _load_config_file(args.config) if args.config else {}
    flags: dict = {
        "seed": args.seed,
        "probe": True if args.probe else None,
        "finetune": {"steps": args.steps, "lr": args.lr, "batch_size": args.batch_size},
        "arch": {"depth": args.depth, "width": args.width, "dtype": args.dtype},
    }
    task = _load_task(args.task)
    conf = _merge(defaults, file_cfg, flags)
    conf["arch"]["in_shape"] = list(task.image_shape)
    out = Path(args.out)
    _write_manifest(out, "finetune", conf)
    fcfg = FinetuneConfig(**conf["finetune"])
    rng = RngState(conf["seed"])
    if args.pretrained:
        extractor = FeatureExtractor.load(Path(args.pretrained) / "extractor")
        res = finetune(rng, extractor, task, fcfg, train_extractor=not conf["probe"])
    else:
        if conf["probe"]:
            raise ConfigError("--probe needs --pretrained features to probe")
        arch = _arch_from_config(conf["arch"])
        res = train_from_scratch(rng, arch, task, fcfg)
    meta = {"accuracy": res.accuracy, "task": task.name, "probe": conf["probe"]}
    _save_classifier(out, res.extractor, res.head, meta)
    _write_trace(out / "trace.jsonl", res.trace)
    _emit({"event": "finetune", "out": str(out), "task": task.name,
           "accuracy": res.accuracy})
    return 0


def _kd_defaults() -> dict:
    k = KdConfig()
    return {
        "seed": 0,
        "kd": {
            "epochs": k.epochs,
            "batch_size": k.batch_size,
            "lr": k.lr,
            "weight_decay": k.weight_decay,
            "eval_batch": k.eval_batch,
        },
    }


def cmd_kd(args) -> int:
    defaults = _kd_defaults()
    file_cfg = _load_config_file(args.config) if args.config else {}
    flags = {"seed": args.seed, "kd": {"epochs": args.epochs, "lr": args.lr}}
    conf = _merge(defaults, file_cfg, flags)
    out = Path(args.out)
    _write_manifest(out, "kd", conf)
    teacher_net, teacher_head = _load_classifier(args.teacher)
    teacher = ClassifierResult(
        accuracy=float("nan"), extractor=teacher_net, head=teacher_head, trace=[]
    )
    student = FeatureExtractor.load(Path(args.pretrained) / "extractor")
    xs, _, _ = _load_distilled(args.distilled)
    task = _load_task(args.task)
    xs = xs.astype(np.float32 if student.cfg.dtype == "f32" else np.float64)
    res = kd_finetune(
        RngState(conf["seed"]), student, teacher, xs, task.n_classes,
        KdConfig(**conf["kd"]),
    )
    acc = evaluate_kd_student(res, task, KdConfig(**conf["kd"]).eval_batch)
    meta = {
        "accuracy": acc,
        "task": task.name,
        "kl_first": res.kl_trace[0]["kl"],
        "kl_final": res.kl_trace[-1]["kl"],
    }
    _save_classifier(out, res.extractor, res.head, meta)
    _write_trace(out / "kl_trace.jsonl", res.kl_trace)
    _emit({"event": "kd", "out": str(out), **meta})
    return 0


def cmd_bias_demo(args) -> int:
    defaults = {"r": 2, "trials": 10_000, "seed": 0, "instance": None}
    file_cfg = _load_config_file(args.config) if args.config else {}
    flags = {"r": args.r, "trials": args.trials, "seed": args.seed,
             "instance": args.instance}
    conf = _merge(defaults, file_cfg, flags)
    out = Path(args.out)
    _write_manifest(out, "bias-demo", conf)
    if conf["instance"]:
        problem, X = load_instance(conf["instance"])
    else:
        problem, X = designed_instance()
    rep = bias_estimate(problem, X, conf["r"], conf["trials"], RngState(conf["seed"]))
    theta_star = inner_solution(problem, X, problem.probs)
    ctrl = plain_gradient_control(
        problem, X, theta_star, conf["r"], conf["trials"], RngState(conf["seed"])
    )
    report = {
        "r": rep.r,
        "trials": rep.trials,
        "seed": rep.seed,
        "exact": rep.exact.tolist(),
        "mc_mean": rep.mc_mean.tolist(),
        "se": rep.se.tolist(),
        "bias": rep.bias.tolist(),
        "flagged": rep.flagged.tolist(),
        "n_flagged": int(rep.flagged.sum()),
        "max_abs_z": rep.max_abs_z(),
        "cov_term": rep.cov_term.tolist(),
        "decomp_residual": rep.decomp_residual.tolist(),
        "decomp_within_4se": bool(
            np.all(rep.decomp_residual < 4 * np.maximum(rep.se, 1e-15))
        ),
        "singular_resamples": rep.singular_resamples,
        "control_flagged": ctrl.flagged.tolist(),
        "control_unbiased": bool(not ctrl.flagged.any()),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit({"event": "bias-demo", "out": str(out), "n_flagged": report["n_flagged"],
           "max_abs_z": report["max_abs_z"], "control_unbiased": report["control_unbiased"]})
    return 0


def cmd_export_images(args) -> int:
    defaults = {"name": "xs", "raw": False}
    file_cfg = _load_config_file(args.config) if args.config else {}
    conf = _merge(defaults, file_cfg,
                  {"name": args.name, "raw": True if args.raw else None})
    out = Path(args.out)
    _write_manifest(out, "export-images", conf)
    arrays, state = load_tree(args.data)
    if conf["name"] not in arrays:
        raise FormatError(f"{args.data} has no array named {conf['name']!r}")
    rows = arrays[conf["name"]]
    shape = tuple(state["image_shape"])
    c, h, w = shape
    if c not in (1, 3):
        raise FormatError(f"can only export 1- or 3-channel images, got {c}")
    if conf["raw"]:
        raw = rows
    else:
        mean = np.asarray(state["mean"])
        std = np.asarray(state["std"])
        raw = denormalize_rows(rows, mean, std, shape)
    ext = "ppm" if c == 3 else "pgm"
    for i, row in enumerate(raw):
        img = row.reshape(shape)
        img = np.clip(img, 0.0, 1.0)
        img = img[0] if c == 1 else np.moveaxis(img, 0, -1)
        write_pnm(out / f"img_{i:03d}.{ext}", img)
    _emit({"event": "export-images", "out": str(out), "count": int(rows.shape[0])})
    return 0


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssdistill",
        description="Self-supervised dataset distillation engine",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file or a previous run manifest")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="render the synthetic source + task suite")
    add_common(p)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--n-source", dest="n_source", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--min-radius", dest="min_radius", type=float)
    p.add_argument("--max-radius", dest="max_radius", type=float)
    p.add_argument("--jitter", type=float)
    p.add_argument("--tint", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-target", help="train the self-supervised target model")
    add_common(p)
    p.add_argument("--data", required=True, help="source dataset tree")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--embed-mode", dest="embed_mode",
                   choices=("backbone_features", "projector_output"))
    p.add_argument("--projector-hidden", dest="projector_hidden",
                   help="comma-separated hidden widths")
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.set_defaults(func=cmd_train_target)

    p = sub.add_parser("embed", help="embed a dataset with a trained target model")
    add_common(p)
    p.add_argument("--model", required=True, help="train-target output model dir")
    p.add_argument("--data", required=True, help="source dataset tree")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("distill", help="distill the source set against its embeddings")
    add_common(p)
    p.add_argument("--data", required=True, help="source dataset tree")
    p.add_argument("--embeds", required=True, help="embed command output dir")
    p.add_argument("--resume", help="checkpoint dir to continue from")
    p.add_argument("--distilled-size", dest="distilled_size", type=int)
    p.add_argument("--pool-size", dest="pool_size", type=int)
    p.add_argument("--inner-steps-max", dest="inner_steps_max", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--meta-lr", dest="meta_lr", type=float)
    p.add_argument("--inner-lr", dest="inner_lr", type=float)
    p.add_argument("--ys-init", dest="ys_init",
                   choices=("target_embed", "standard_normal"))
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("pretrain", help="pre-train a backbone on distilled pairs")
    add_common(p)
    p.add_argument("--distilled", help="distill output tree (xs/ys)")
    p.add_argument("--random-subset", dest="random_subset", type=int,
                   help="baseline: use this many random real rows instead")
    p.add_argument("--data", help="source tree (for --random-subset)")
    p.add_argument("--embeds", help="embeddings dir (for --random-subset)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune or probe on a labeled task")
    add_common(p)
    p.add_argument("--task", required=True, help="task dataset tree")
    p.add_argument("--pretrained", help="pretrain output dir; omit to train from scratch")
    p.add_argument("--probe", action="store_true", help="train the head only")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("kd", help="distill a trained teacher into a student on xs")
    add_common(p)
    p.add_argument("--teacher", required=True, help="finetune output dir")
    p.add_argument("--pretrained", required=True, help="pretrain output dir (student init)")
    p.add_argument("--distilled", required=True, help="distill output tree")
    p.add_argument("--task", required=True, help="task tree for evaluation")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_kd)

    p = sub.add_parser("bias-demo", help="run the meta-gradient bias demonstration")
    add_common(p)
    p.add_argument("--r", type=int, help="inner-sample count per trial")
    p.add_argument("--trials", type=int)
    p.add_argument("--instance", help="instance JSON; defaults to the shipped one")
    p.set_defaults(func=cmd_bias_demo)

    p = sub.add_parser("export-images", help="write dataset rows as PPM/PGM files")
    add_common(p)
    p.add_argument("--data", required=True, help="tree holding the rows")
    p.add_argument("--name", help="array name inside the tree (default xs)")
    p.add_argument("--raw", action="store_true",
                   help="rows are already raw [0,1]; skip de-normalization")
    p.set_defaults(func=cmd_export_images)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as e:
        _emit({"event": "error", "kind": type(e).__name__, "message": str(e)}, "quiet")
        return 2
    except FormatError as e:
        _emit({"event": "error", "kind": type(e).__name__, "message": str(e)}, "quiet")
        return 3
    except (NumericError, TrainingError) as e:
        _emit({"event": "error", "kind": type(e).__name__, "message": str(e)}, "quiet")
        return 4
    except FileNotFoundError as e:
        _emit({"event": "error", "kind": "FileNotFoundError", "message": str(e)}, "quiet")
        return 2


if __name__ == "__main__":
    sys.exit(main())
