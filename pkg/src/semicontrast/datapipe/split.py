"""Chronological (by sol) train/test splitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChronoSplit:
    train_sol_range: tuple[int, int]
    test_sol_range: tuple[int, int]
    shuffle_train_val: bool = True

    def __post_init__(self):
        (a0, a1), (b0, b1) = self.train_sol_range, self.test_sol_range
        if a0 > a1 or b0 > b1:
            raise ValueError("sol ranges must be (low, high) with low <= high")
        if a0 <= b1 and b0 <= a1:
            raise ValueError(f"sol ranges overlap: {self.train_sol_range} and {self.test_sol_range}")


MSL_SPLIT = ChronoSplit((3, 564), (565, 1060))
AI4MARS_SPLIT = ChronoSplit((1, 1486), (1487, 2579))


def chrono_split(samples, split: ChronoSplit, rng: np.random.Generator | None = None):
    """Partition ``samples`` (objects with a ``sol`` attribute) by sol interval.

    Samples in neither interval are dropped and counted in the log. The
    train/val part is shuffled when the split asks for it and ``rng`` is given.
    """
    train, test, dropped = [], [], 0
    for s in samples:
        if s.sol is None:
            raise ValueError(f"sample {getattr(s, 'id', '?')} has no sol")
        if split.train_sol_range[0] <= s.sol <= split.train_sol_range[1]:
            train.append(s)
        elif split.test_sol_range[0] <= s.sol <= split.test_sol_range[1]:
            test.append(s)
        else:
            dropped += 1
    if dropped:
        logger.warning("%d samples fall outside both sol ranges and were dropped", dropped)
    if split.shuffle_train_val and rng is not None and train:
        train = [train[i] for i in rng.permutation(len(train))]
    return train, test
