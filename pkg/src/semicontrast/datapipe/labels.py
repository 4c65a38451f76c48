"""Label-map resampling to feature-map resolution."""
from __future__ import annotations

import numpy as np


def _source_index(n_out: int, n_in: int) -> np.ndarray:
    # output cell i spans [i*n_in/n_out, (i+1)*n_in/n_out); take its first source pixel
    return (np.arange(n_out) * n_in) // n_out


def label_downsample(labels, size, mode: str = "nearest") -> np.ndarray:
    """Resample an ``(..., H, W)`` integer grid to ``(..., h, w)``.

    ``nearest`` picks, for each output cell, the source pixel at
    ``floor(i * H / h)``. This composes exactly across integer ratios, so two
    successive downsamples equal one direct downsample. ``majority`` takes the
    most frequent id in the cell (ties to the smaller id). UNLABELED is treated
    like any other id in both modes.
    """
    labels = np.asarray(labels)
    h, w = int(size[0]), int(size[1])
    H, W = labels.shape[-2:]
    if h > H or w > W:
        raise ValueError(f"target {h}x{w} is larger than source {H}x{W}")
    if h < 1 or w < 1:
        raise ValueError("target size must be positive")
    if mode == "nearest":
        rows, cols = _source_index(h, H), _source_index(w, W)
        return labels[..., rows[:, None], cols[None, :]]
    if mode != "majority":
        raise ValueError(f"unknown mode {mode!r}")
    flat = labels.reshape(-1, H, W)
    out = np.empty((flat.shape[0], h, w), dtype=labels.dtype)
    r_edges = (np.arange(h + 1) * H) // h
    c_edges = (np.arange(w + 1) * W) // w
    for b in range(flat.shape[0]):
        for i in range(h):
            for j in range(w):
                cell = flat[b, r_edges[i]:r_edges[i + 1], c_edges[j]:c_edges[j + 1]].reshape(-1)
                out[b, i, j] = np.argmax(np.bincount(cell.astype(np.int64)))
    return out.reshape(labels.shape[:-2] + (h, w))
