"""Class-balanced anchor/positive pairing."""
from __future__ import annotations

import numpy as np


def class_balanced_batch(labels, rng: np.random.Generator):
    """One (anchor, positive) index pair per class present in ``labels``.

    Returns ``(classes, anchor_idx, positive_idx)`` arrays, classes ascending.
    Anchor and positive are distinct images when the class has at least two,
    otherwise the single image is used twice.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("labeled pool is empty")
    classes = np.unique(labels)
    anchors, positives = [], []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if members.size >= 2:
            a, p = rng.choice(members, size=2, replace=False)
        else:
            a = p = members[0]
        anchors.append(a)
        positives.append(p)
    return classes, np.asarray(anchors, dtype=np.int64), np.asarray(positives, dtype=np.int64)
