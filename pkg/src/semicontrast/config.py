"""Run configuration: YAML in, fully materialized record out."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .datapipe.augment import AugmentationPolicy
from .datapipe.split import AI4MARS_SPLIT, MSL_SPLIT
from .datapipe.synth import SynthSpec
from .evalkit import FACC_MODES
from .losses import LossConfig
from .trainloop.models import ModelSpec
from .trainloop.plan import TrainPlan

TASKS = ("classify", "segment")
CHRONO_SPLITS = {"msl": MSL_SPLIT, "ai4mars": AI4MARS_SPLIT}
LOSS_FIELDS = tuple(f.name for f in dataclasses.fields(LossConfig) if f.name != "num_classes")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DataSpec:
    kind: str = "synthetic"
    synthetic: SynthSpec = field(default_factory=SynthSpec)
    labeled: Optional[str] = None
    unlabeled: Optional[str] = None
    test: Optional[str] = None
    image_size: Optional[tuple[int, int]] = None
    num_classes: Optional[int] = None
    chrono_split: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "synthetic": self.synthetic.to_dict(),
            "labeled": self.labeled,
            "unlabeled": self.unlabeled,
            "test": self.test,
            "image_size": None if self.image_size is None else list(self.image_size),
            "num_classes": self.num_classes,
            "chrono_split": self.chrono_split,
        }


def _default_augment() -> dict:
    return {
        "strong": AugmentationPolicy(),
        "weak": AugmentationPolicy.weak(),
        "seg": AugmentationPolicy.segmentation(),
    }


@dataclass
class RunConfig:
    task: str = "classify"
    seed: int = 0
    out: Optional[str] = None
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    plan: TrainPlan = field(default_factory=TrainPlan)
    loss: dict = field(default_factory=lambda: {k: getattr(LossConfig(2), k) for k in LOSS_FIELDS})
    augment: dict = field(default_factory=_default_augment)
    facc_mode: str = "fwiou"

    def loss_config(self, num_classes: int) -> LossConfig:
        return LossConfig(num_classes=num_classes, **self.loss)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "seed": self.seed,
            "out": self.out,
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "plan": self.plan.to_dict(),
            "loss": dict(self.loss),
            "augment": {k: v.to_dict() for k, v in self.augment.items()},
            "facc_mode": self.facc_mode,
        }

    def digest_record(self) -> dict:
        """Everything that shapes the run; the output location does not."""
        d = self.to_dict()
        d.pop("out")
        return d


def _section(raw: dict, name: str, allowed) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(name, "must be a mapping")
    unknown = sorted(set(value) - set(allowed))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", f"unknown key (allowed: {', '.join(sorted(allowed))})")
    return value


def _build(name: str, factory, kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from None


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(unknown[0], f"unknown key (allowed: {', '.join(sorted(top))})")

    task = raw.get("task", "classify")
    if task not in TASKS:
        raise ConfigError("task", f"must be one of {TASKS}, got {task!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed", "must be an integer")

    data_fields = {f.name for f in dataclasses.fields(DataSpec)}
    d = dict(_section(raw, "data", data_fields))
    synth_fields = {f.name for f in dataclasses.fields(SynthSpec)}
    synth_raw = _tuples(_section(d, "synthetic", synth_fields)) if "synthetic" in d else {}
    synth_raw.setdefault("task", "cls" if task == "classify" else "seg")
    d["synthetic"] = _build("data.synthetic", SynthSpec, synth_raw)
    if d.get("image_size") is not None:
        d["image_size"] = tuple(d["image_size"])
    data = _build("data", DataSpec, d)
    if data.kind not in ("synthetic", "folders"):
        raise ConfigError("data.kind", f"must be 'synthetic' or 'folders', got {data.kind!r}")
    if (data.synthetic.task == "cls") != (task == "classify"):
        raise ConfigError("data.synthetic.task", f"does not match task {task!r}")
    if data.chrono_split is not None and data.chrono_split not in CHRONO_SPLITS:
        raise ConfigError("data.chrono_split", f"must be one of {sorted(CHRONO_SPLITS)}")

    model = _build("model", ModelSpec, _section(raw, "model", {f.name for f in dataclasses.fields(ModelSpec)}))
    plan_raw = _section(raw, "plan", {"cls", "seg", "seed"})
    plan = _build("plan", TrainPlan.from_dict, {"d": {**plan_raw, "seed": seed}})
    loss = {**RunConfig().loss, **_section(raw, "loss", LOSS_FIELDS)}
    _build("loss", LossConfig, {"num_classes": 2, **loss})

    policy_fields = {f.name for f in dataclasses.fields(AugmentationPolicy)}
    augment = _default_augment()
    for key, value in _section(raw, "augment", augment.keys()).items():
        unknown = sorted(set(value or {}) - policy_fields)
        if unknown:
            raise ConfigError(f"augment.{key}.{unknown[0]}", "unknown key")
        augment[key] = _build(f"augment.{key}", AugmentationPolicy.from_dict, {"d": {**augment[key].to_dict(), **(value or {})}})

    facc_mode = raw.get("facc_mode", "fwiou")
    if facc_mode not in FACC_MODES:
        raise ConfigError("facc_mode", f"must be one of {FACC_MODES}")
    out = raw.get("out")
    return RunConfig(task=task, seed=seed, out=out, data=data, model=model, plan=plan, loss=loss, augment=augment, facc_mode=facc_mode)


def load_config(path) -> RunConfig:
    """Read a config file; a run manifest is accepted and its config reused."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"not valid YAML: {exc}") from None
    if isinstance(raw, dict) and "manifest_version" in raw:
        raw = raw.get("config") or {}
    return config_from_dict(raw)


def check_paths(cfg: RunConfig):
    """Referenced dataset paths must exist before anything runs."""
    if cfg.data.kind != "folders":
        return
    if cfg.data.labeled is None:
        raise ConfigError("data.labeled", "required when data.kind is 'folders'")
    if cfg.data.test is None and cfg.data.chrono_split is None:
        raise ConfigError("data.test", "required unless data.chrono_split is set")
    if cfg.task == "segment" and cfg.data.num_classes is None:
        raise ConfigError("data.num_classes", "required for segmentation folders")
    for name in ("labeled", "unlabeled", "test"):
        value = getattr(cfg.data, name)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"data.{name}", f"path does not exist: {value}")


def dump_yaml(obj) -> str:
    return yaml.safe_dump(obj, sort_keys=False, default_flow_style=None)
