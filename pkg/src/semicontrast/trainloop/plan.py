"""Training plans: every schedule hyperparameter in one hashable record."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field


def _default_cls_lrs():
    return {"cls_head": 1e-3, "backbone": 1e-6, "proj_s": 1e-6, "proj_u": 1e-6}


@dataclass(frozen=True)
class ClsPlan:
    epochs: int = 30
    batch_size: int = 16
    unlabeled_batch_size: int = 16
    lrs: dict = field(default_factory=_default_cls_lrs)
    milestones: tuple = (20, 25)
    gamma: float = 0.1
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.unlabeled_batch_size <= 0:
            raise ValueError("epochs and batch sizes must be positive")
        if any(v <= 0 for v in self.lrs.values()):
            raise ValueError("learning rates must be positive")
        unknown = set(self.lrs) - {"cls_head", "backbone", "proj_s", "proj_u"}
        if unknown:
            raise ValueError(f"unknown parameter groups in lrs: {sorted(unknown)}")


@dataclass(frozen=True)
class SegPlan:
    step_epochs: tuple = (60, 60, 60)
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    threshold: float = 0.9
    queue_length: int = 32
    ce_only: bool = False

    def __post_init__(self):
        if len(self.step_epochs) != 3 or any(e < 0 for e in self.step_epochs) or sum(self.step_epochs) == 0:
            raise ValueError("step_epochs must be three non-negative counts with a positive total")
        if self.batch_size <= 0 or self.lr <= 0 or self.queue_length <= 0:
            raise ValueError("batch_size, lr and queue_length must be positive")
        # thresholds above 1 are allowed and switch pseudo labeling off
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")

    def boundaries(self) -> tuple[int, int]:
        """Last epoch (1-based) of steps 1 and 2."""
        e1, e2, _ = self.step_epochs
        return e1, e1 + e2

    def stage_of(self, epoch: int) -> int:
        """1-based epoch -> step number (1, 2 or 3)."""
        b1, b2 = self.boundaries()
        return 1 if epoch <= b1 else 2 if epoch <= b2 else 3


@dataclass(frozen=True)
class TrainPlan:
    cls: ClsPlan = field(default_factory=ClsPlan)
    seg: SegPlan = field(default_factory=SegPlan)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cls"]["milestones"] = list(d["cls"]["milestones"])
        d["seg"]["step_epochs"] = list(d["seg"]["step_epochs"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        c = dict(d.get("cls", {}))
        s = dict(d.get("seg", {}))
        if "milestones" in c:
            c["milestones"] = tuple(c["milestones"])
        if "lrs" in c:
            c["lrs"] = {**_default_cls_lrs(), **c["lrs"]}
        if "step_epochs" in s:
            s["step_epochs"] = tuple(s["step_epochs"])
        return cls(cls=ClsPlan(**c), seg=SegPlan(**s), seed=int(d.get("seed", 0)))


def plan_hash(*records: dict) -> str:
    """Stable digest of resolved config records (key order independent)."""
    blob = json.dumps(records, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()
