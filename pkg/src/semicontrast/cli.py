"""Command-line entry point: ``semicontrast {train,eval,synth,export-features}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__, evalkit
from .config import CHRONO_SPLITS, ConfigError, RunConfig, check_paths, dump_yaml, load_config
from .datapipe import (
    chrono_split,
    load_classification_folder,
    load_segmentation_folder,
    load_unlabeled_folder,
    synth_toy_dataset,
    write_classification_folder,
    write_segmentation_folder,
    write_unlabeled_folder,
)
from .datapipe.synth import SynthSpec
from .trainloop import (
    CheckpointError,
    ClsData,
    SegData,
    build_model,
    checkpoint_load,
    evaluate_classifier,
    evaluate_segmenter,
    plan_hash,
    train_classification,
    train_segmentation,
)

logger = logging.getLogger("semicontrast")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
OUT_ROOT_ENV = "SEMICONTRAST_OUT_ROOT"
MANIFEST = "manifest.yaml"


class DataError(RuntimeError):
    pass


@dataclass
class Loaded:
    labeled: list
    unlabeled: list
    test: list
    class_names: tuple
    num_classes: int


def git_revision() -> str:
    try:
        res = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 else "unknown"


def load_data(cfg: RunConfig) -> Loaded:
    d = cfg.data
    if d.kind == "synthetic":
        ds = synth_toy_dataset(d.synthetic, cfg.seed)
        return Loaded(ds.labeled, ds.unlabeled, ds.test, tuple(ds.class_names), d.synthetic.num_classes)
    try:
        unlabeled = load_unlabeled_folder(d.unlabeled, d.image_size) if d.unlabeled else []
        if cfg.task == "classify":
            labeled, names = load_classification_folder(d.labeled, d.image_size)
            test = []
            if d.test:
                test, test_names = load_classification_folder(d.test, d.image_size)
                if list(test_names) != list(names):
                    raise DataError(f"class folders differ between data.labeled {names} and data.test {test_names}")
            num_classes = len(names)
            if d.num_classes is not None and d.num_classes != num_classes:
                raise DataError(f"data.num_classes is {d.num_classes} but data.labeled has {num_classes} class folders")
        else:
            labeled = load_segmentation_folder(d.labeled, d.image_size)
            test = load_segmentation_folder(d.test, d.image_size) if d.test else []
            num_classes = d.num_classes
            names = tuple(str(c) for c in range(num_classes))
        if d.chrono_split is not None:
            pool = labeled + test
            labeled, test = chrono_split(pool, CHRONO_SPLITS[d.chrono_split], np.random.default_rng(cfg.seed))
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if not labeled:
        raise DataError("the labeled split is empty")
    if not test:
        raise DataError("the test split is empty")
    return Loaded(labeled, unlabeled, test, tuple(names), num_classes)


def resolve_out(cfg: RunConfig, config_path: Optional[str], cli_out: Optional[str]) -> Path:
    if cli_out:
        return Path(cli_out)
    if cfg.out:
        return Path(cfg.out)
    stem = Path(config_path).stem if config_path else cfg.task
    return Path(os.environ.get(OUT_ROOT_ENV, "runs")) / stem


def write_manifest(out: Path, cfg: RunConfig, loaded: Loaded, digest: str):
    manifest = {
        "manifest_version": 1,
        "package_version": __version__,
        "git_revision": git_revision(),
        "seed": cfg.seed,
        "plan_hash": digest,
        "num_classes": loaded.num_classes,
        "class_names": list(loaded.class_names),
        "config": cfg.to_dict(),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST).write_text(dump_yaml(manifest))


def _ckpt_extra(cfg: RunConfig, loaded: Loaded) -> dict:
    return {"task": cfg.task, "num_classes": loaded.num_classes, "class_names": list(loaded.class_names)}


def run_train(cfg: RunConfig, out: Path, resume: bool = False, dump_pseudo: bool = False) -> list[dict]:
    """Train per ``cfg`` into ``out``; returns the per-epoch metric rows."""
    loaded = load_data(cfg)
    digest = plan_hash(cfg.digest_record())
    if resume and not (out / "last.ckpt").exists():
        raise DataError(f"--resume given but no checkpoint at {out / 'last.ckpt'}")
    cfg = replace(cfg, out=str(out))
    write_manifest(out, cfg, loaded, digest)
    torch.manual_seed(cfg.seed)
    task = cfg.task
    model = build_model(task, cfg.model, loaded.num_classes)
    loss_cfg = cfg.loss_config(loaded.num_classes)
    extra = _ckpt_extra(cfg, loaded)
    if task == "classify":
        data = ClsData(loaded.labeled, loaded.unlabeled, loaded.test, loaded.num_classes, loaded.class_names)
        return train_classification(
            model, data, cfg.plan.cls, loss_cfg, cfg.augment["strong"], cfg.augment["weak"], cfg.seed,
            out_dir=out, plan_digest=digest, resume=resume, ckpt_extra=extra,
        )
    data = SegData(loaded.labeled, loaded.test, loaded.num_classes, loaded.class_names)
    rows, _ = train_segmentation(
        model, data, cfg.plan.seg, loss_cfg, cfg.augment["seg"], cfg.seed,
        out_dir=out, plan_digest=digest, resume=resume, facc_mode=cfg.facc_mode, ckpt_extra=extra,
        pseudo_dump_dir=out / "pseudo" if dump_pseudo else None,
    )
    return rows


def _config_for_checkpoint(ckpt_path: Path, config_path: Optional[str]) -> RunConfig:
    if config_path:
        return load_config(config_path)
    manifest = ckpt_path.parent / MANIFEST
    if not manifest.exists():
        raise ConfigError("--config", f"not given and no {MANIFEST} next to {ckpt_path}")
    return load_config(manifest)


def _restore(ckpt_path: Path, cfg: RunConfig, loaded: Loaded):
    try:
        ckpt = checkpoint_load(ckpt_path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc
    stored = (ckpt.extra or {}).get("num_classes")
    if stored is not None and stored != loaded.num_classes:
        raise DataError(f"class-count mismatch: checkpoint has {stored} classes, dataset has {loaded.num_classes}")
    model = build_model(cfg.task, cfg.model, loaded.num_classes)
    try:
        model.load_state_dict(ckpt.model_state)
    except RuntimeError as exc:
        raise DataError(f"checkpoint does not fit the configured model: {exc}") from exc
    model.eval()
    return model


def _split(loaded: Loaded, name: str) -> list:
    samples = {"test": loaded.test, "labeled": loaded.labeled}[name]
    if not samples:
        raise DataError(f"split {name!r} is empty")
    return samples


def run_eval(ckpt_path, cfg: RunConfig, split: str = "test", facc_mode: Optional[str] = None):
    ckpt_path = Path(ckpt_path)
    loaded = load_data(cfg)
    model = _restore(ckpt_path, cfg, loaded)
    samples = _split(loaded, split)
    if cfg.task == "classify":
        report = evaluate_classifier(model, samples, loaded.num_classes)
    else:
        report = evaluate_segmenter(model, samples, loaded.num_classes, facc_mode or cfg.facc_mode)
    return report, loaded


def run_synth(spec: SynthSpec, seed: int, out: Path) -> Path:
    ds = synth_toy_dataset(spec, seed)
    if spec.task == "cls":
        write_classification_folder(ds.labeled, ds.class_names, out / "labeled")
        write_classification_folder(ds.test, ds.class_names, out / "test")
    else:
        write_segmentation_folder(ds.labeled, out / "labeled")
        write_segmentation_folder(ds.test, out / "test")
    write_unlabeled_folder(ds.unlabeled, out / "unlabeled")
    (out / "synth_spec.yaml").write_text(dump_yaml({"seed": seed, "class_names": list(ds.class_names), "spec": spec.to_dict()}))
    return out


def run_export(ckpt_path, cfg: RunConfig, split: str, stride: int, path) -> str:
    loaded = load_data(cfg)
    model = _restore(Path(ckpt_path), cfg, loaded)
    samples = _split(loaded, split)
    return evalkit.export_features(model, [(s.id, s.image, s.label) for s in samples], stride=stride, path=path)


# ---- argument handling ----

def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed, plan=replace(cfg.plan, seed=args.seed))
    return cfg


def _cmd_train(args) -> int:
    if not args.config:
        raise ConfigError("--config", "required")
    cfg = _apply_overrides(load_config(args.config), args)
    check_paths(cfg)
    out = resolve_out(cfg, args.config, args.out)
    rows = run_train(cfg, out, resume=args.resume, dump_pseudo=args.dump_pseudo)
    if rows:
        last = rows[-1]
        keys = ("top1", "macc") if cfg.task == "classify" else ("acc", "miou")
        scores = " ".join(f"{k} {last[k]:.4f}" for k in keys)
        print(f"finished epoch {last['epoch']}: {scores} -> {out}")
    else:
        print(f"nothing left to train -> {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _apply_overrides(_config_for_checkpoint(Path(args.checkpoint), args.config), args)
    check_paths(cfg)
    report, loaded = run_eval(args.checkpoint, cfg, args.split, args.facc_mode)
    text = report.summary(per_class=args.per_class, class_names=loaded.class_names)
    print(text)
    record = {"split": args.split, "checkpoint": str(args.checkpoint), **report.row()}
    if args.per_class:
        per_class = report.per_class_acc
        record["per_class_acc"] = {n: (None if np.isnan(v) else float(v)) for n, v in zip(loaded.class_names, per_class)}
        if report.per_class_iou is not None:
            record["per_class_iou"] = {n: (None if np.isnan(v) else float(v)) for n, v in zip(loaded.class_names, report.per_class_iou)}
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_synth(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        spec = cfg.data.synthetic
        seed = cfg.seed
    else:
        spec, seed = SynthSpec(task="seg" if args.seg else "cls"), 0
    if args.seg and spec.task != "seg":
        spec = replace(spec, task="seg")
    if args.seed is not None:
        seed = args.seed
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ROOT_ENV, "runs")) / f"synth_{spec.task}_{seed}"
    run_synth(spec, seed, out)
    print(f"wrote {spec.task} toy dataset to {out}")
    return EXIT_OK


def _cmd_export(args) -> int:
    cfg = _apply_overrides(_config_for_checkpoint(Path(args.checkpoint), args.config), args)
    check_paths(cfg)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"features_{args.split}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    run_export(args.checkpoint, cfg, args.split, args.stride, out)
    print(f"wrote features to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semicontrast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress every epoch")
    p.add_argument("--workers", type=int, default=1, help="CPU threads for tensor ops (1 keeps runs bit-reproducible)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the full training schedule")
    t.add_argument("--config", required=False, help="YAML run config or a previous run's manifest.yaml")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV}/<config name>)")
    t.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    t.add_argument("--dump-pseudo", action="store_true", help="segmentation: save merged pseudo-label masks per step-3 epoch")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="defaults to the manifest next to the checkpoint")
    e.add_argument("--split", choices=("test", "labeled"), default="test")
    e.add_argument("--seed", type=int)
    e.add_argument("--per-class", action="store_true", help="add the per-class table")
    e.add_argument("--facc-mode", choices=evalkit.FACC_MODES, help="override the config's FACC reading")
    e.add_argument("--out", help="report path (default: eval_<split>.json next to the checkpoint)")
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("synth", help="write the procedural toy dataset to disk")
    s.add_argument("--config", help="take data.synthetic and seed from this config")
    s.add_argument("--seg", action="store_true", help="segmentation layout instead of classification")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_synth)

    x = sub.add_parser("export-features", help="dump backbone features with labels as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--config")
    x.add_argument("--split", choices=("test", "labeled"), default="test")
    x.add_argument("--stride", type=int, default=1)
    x.add_argument("--seed", type=int)
    x.add_argument("--out")
    x.set_defaults(func=_cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(args.workers)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
