"""Learning-rate schedules; pure closed forms."""
from __future__ import annotations


def lr_at_epoch_cls(epoch: int, base_lr: float, milestones=(20, 25), gamma: float = 0.1) -> float:
    """Step decay: multiply by ``gamma`` once per milestone already reached."""
    return base_lr * gamma ** sum(1 for m in milestones if m <= epoch)


def lr_at_iter_seg(it: int, total_iters: int, base_lr: float, power: float = 0.9) -> float:
    """Polynomial annealing ``base_lr * (1 - it / total) ** power``."""
    if total_iters <= 0:
        raise ValueError("total_iters must be positive")
    if not 0 <= it <= total_iters:
        raise ValueError(f"iteration {it} outside [0, {total_iters}]")
    return base_lr * (1.0 - it / total_iters) ** power
