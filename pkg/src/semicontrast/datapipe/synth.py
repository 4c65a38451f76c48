"""Procedural toy benchmark with a chronological train/test shift.

Classification images show one of four shapes on a noisy terrain
background. Segmentation images are Voronoi mosaics of four terrain
textures with a contiguous unlabeled area. The test split moves both the
class frequencies and the appearance (object scale, tint, blur, texture
scale) by an amount set with ``shift``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy import ndimage

from ..losses import UNLABELED
from .folders import Sample

CLS_CLASS_NAMES = ("disc", "bar", "ring", "cross")
SEG_CLASS_NAMES = ("soil", "bedrock", "sand", "big_rock")

TRAIN_SOLS = (1, 600)
TEST_SOLS = (601, 1000)


@dataclass(frozen=True)
class SynthSpec:
    task: str = "cls"
    num_classes: int = 4
    image_size: int = 64
    n_labeled: int = 120
    n_unlabeled: int = 600
    n_test: int = 400
    shift: float = 1.0
    unlabeled_fraction: float = 0.45
    train_freq: Optional[tuple[float, ...]] = None
    unlabeled_freq: Optional[tuple[float, ...]] = None
    unlabeled_test_mix: float = 0.5
    regions: int = 6

    def __post_init__(self):
        if self.task not in ("cls", "seg"):
            raise ValueError(f"task must be 'cls' or 'seg', got {self.task!r}")
        if self.num_classes != 4:
            raise ValueError("the procedural generator draws exactly 4 classes")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if min(self.n_labeled, self.n_test) < 1 or self.n_unlabeled < 0:
            raise ValueError("sample counts must be positive (n_unlabeled may be 0)")
        if not 0.0 <= self.shift <= 1.0:
            raise ValueError("shift must be in [0, 1]")
        if not 0.0 <= self.unlabeled_fraction < 1.0:
            raise ValueError("unlabeled_fraction must be in [0, 1)")
        if not 0.0 <= self.unlabeled_test_mix <= 1.0:
            raise ValueError("unlabeled_test_mix must be in [0, 1]")
        for name in ("train_freq", "unlabeled_freq"):
            freq = getattr(self, name)
            if freq is not None and (len(freq) != self.num_classes or min(freq) < 0 or sum(freq) <= 0):
                raise ValueError(f"{name} must list {self.num_classes} non-negative weights")

    def frequencies(self):
        default = (0.55, 0.25, 0.13, 0.07) if self.task == "cls" else (0.45, 0.3, 0.15, 0.1)
        train = np.asarray(self.train_freq or default, dtype=float)
        train = train / train.sum()
        test = (1 - 0.5 * self.shift) * train + 0.5 * self.shift * train[::-1]
        unl = np.asarray(self.unlabeled_freq or (0.6, 0.2, 0.12, 0.08), dtype=float)
        return train, test / test.sum(), unl / unl.sum()

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class SynthDataset:
    labeled: list
    unlabeled: list
    test: list
    class_names: tuple
    spec: SynthSpec = field(default_factory=SynthSpec)


def _smooth_noise(rng, size, sigma):
    return ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")


def _normalize(x):
    x = x - x.min()
    return x / max(x.max(), 1e-8)


def _appearance(rng, s: float):
    """Appearance draw; ``s`` in [0, 1] slides from train-like to test-like."""
    return {
        "scale": rng.uniform(0.22 + 0.12 * s, 0.38 + 0.2 * s),
        "tint": np.array([0.0, 0.04 * s, 0.1 * s]) + rng.uniform(-0.05, 0.05, 3),
        "blur": rng.uniform(0.0, 0.9 * s),
        "contrast": rng.uniform(1.0 - 0.25 * s, 1.0 - 0.05 * s),
        "texture": 1.0 + 0.4 * s,
    }


def _shape_mask(kind: int, size: int, rng, scale: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float) / size
    r = scale / 2
    cy, cx = rng.uniform(r + 0.02, 1 - r - 0.02, 2) if r < 0.47 else (0.5, 0.5)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    dist = np.sqrt(u**2 + v**2)
    if kind == 0:
        return dist <= r
    if kind == 1:
        return (np.abs(u) <= r) & (np.abs(v) <= r * 0.3)
    if kind == 2:
        return (dist <= r) & (dist >= r * 0.6)
    arm = r * 0.28
    return ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))


def _finish(rgb, app):
    rgb = rgb + app["tint"][:, None, None]
    rgb = 0.5 + (rgb - 0.5) * app["contrast"]
    if app["blur"] > 0.05:
        rgb = ndimage.gaussian_filter(rgb, (0, app["blur"], app["blur"]))
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def _cls_image(rng, kind: int, size: int, s: float) -> np.ndarray:
    app = _appearance(rng, s)
    ground = 0.45 + 0.12 * _smooth_noise(rng, size, 3.0 * app["texture"]) / 0.12 + 0.04 * rng.standard_normal((size, size))
    base = np.array([0.62, 0.45, 0.32])
    rgb = base[:, None, None] * np.clip(ground, 0.1, 1.3)[None]
    mask = _shape_mask(kind, size, rng, app["scale"])
    obj_color = np.array([0.85, 0.85, 0.8]) * rng.uniform(0.8, 1.1) + rng.uniform(-0.08, 0.08, 3)
    shade = 0.85 + 0.15 * _normalize(_smooth_noise(rng, size, 6.0))
    rgb = np.where(mask[None], obj_color[:, None, None] * shade[None], rgb)
    return _finish(rgb, app)


def _terrain(rng, kind: int, size: int, app) -> np.ndarray:
    t = app["texture"]
    if kind == 0:  # soil: fine grain
        g = 0.5 + 0.35 * _normalize(_smooth_noise(rng, size, 0.8 * t)) - 0.15
        color = np.array([0.60, 0.42, 0.30])
    elif kind == 1:  # bedrock: smooth slabs with dark cracks
        g = 0.45 + 0.3 * _normalize(_smooth_noise(rng, size, 6.0 * t))
        cracks = np.abs(_smooth_noise(rng, size, 3.0 * t)) < 0.02
        g = np.where(cracks, g * 0.5, g)
        color = np.array([0.55, 0.52, 0.50])
    elif kind == 2:  # sand: ripples
        yy, xx = np.mgrid[0:size, 0:size].astype(float)
        theta = rng.uniform(-0.4, 0.4)
        period = rng.uniform(5.0, 7.0) * t
        g = 0.65 + 0.15 * np.sin(2 * np.pi * (xx * np.sin(theta) + yy * np.cos(theta)) / period)
        color = np.array([0.78, 0.62, 0.42])
    else:  # big rock: dark shaded boulders
        g = 0.25 + 0.35 * _normalize(_smooth_noise(rng, size, 2.5 * t)) ** 2
        color = np.array([0.45, 0.38, 0.35])
    return color[:, None, None] * g[None]


def _voronoi_labels(rng, size: int, regions: int, freq) -> np.ndarray:
    seeds = rng.uniform(0, size, (regions, 2))
    yy, xx = np.mgrid[0:size, 0:size]
    d = (yy[None] - seeds[:, 0, None, None]) ** 2 + (xx[None] - seeds[:, 1, None, None]) ** 2
    owner = d.argmin(0)
    region_cls = rng.choice(len(freq), size=regions, p=freq)
    return region_cls[owner]


def _seg_image(rng, size: int, s: float, freq, regions: int):
    app = _appearance(rng, s)
    labels = _voronoi_labels(rng, size, regions, freq)
    rgb = np.zeros((3, size, size))
    for c in np.unique(labels):
        rgb = np.where((labels == c)[None], _terrain(rng, int(c), size, app), rgb)
    return _finish(rgb, app), labels


def _unlabeled_area(rng, size: int, fraction: float) -> np.ndarray:
    """Contiguous unlabeled area, biased toward the top (the far field)."""
    if fraction <= 0:
        return np.zeros((size, size), dtype=bool)
    field_ = _normalize(_smooth_noise(rng, size, 5.0)) + np.linspace(1.0, 0.0, size)[:, None]
    k = int(round(fraction * size * size))
    order = np.argsort(-field_.reshape(-1), kind="stable")
    out = np.zeros(size * size, dtype=bool)
    out[order[:k]] = True
    return out.reshape(size, size)


def _sols(rng, n, lo_hi):
    return np.sort(rng.integers(lo_hi[0], lo_hi[1] + 1, size=n))


def synth_toy_dataset(spec: SynthSpec, seed: int) -> SynthDataset:
    """Generate labeled, unlabeled and test sets; identical for identical seeds."""
    rng = np.random.default_rng(seed)
    train_f, test_f, unl_f = spec.frequencies()
    size = spec.image_size
    labeled, unlabeled, test = [], [], []

    if spec.task == "cls":
        y_lab = rng.choice(4, size=spec.n_labeled, p=train_f)
        # guarantee every class at least once in the labeled pool
        y_lab[: spec.num_classes] = np.arange(spec.num_classes)
        for i, (y, sol) in enumerate(zip(y_lab, _sols(rng, spec.n_labeled, TRAIN_SOLS))):
            img = _cls_image(rng, int(y), size, 0.0)
            labeled.append(Sample(f"lab{i:05d}", torch.from_numpy(img), int(y), int(sol)))
        for i, y in enumerate(rng.choice(4, size=spec.n_unlabeled, p=unl_f)):
            s = spec.shift if rng.random() < spec.unlabeled_test_mix else 0.0
            unlabeled.append(Sample(f"unl{i:05d}", torch.from_numpy(_cls_image(rng, int(y), size, s))))
        y_test = rng.choice(4, size=spec.n_test, p=test_f)
        for i, (y, sol) in enumerate(zip(y_test, _sols(rng, spec.n_test, TEST_SOLS))):
            img = _cls_image(rng, int(y), size, spec.shift)
            test.append(Sample(f"tst{i:05d}", torch.from_numpy(img), int(y), int(sol)))
        names = CLS_CLASS_NAMES
    else:
        for i, sol in enumerate(_sols(rng, spec.n_labeled, TRAIN_SOLS)):
            img, lab = _seg_image(rng, size, 0.0, train_f, spec.regions)
            lab = np.where(_unlabeled_area(rng, size, spec.unlabeled_fraction), UNLABELED, lab)
            labeled.append(Sample(f"lab{i:05d}", torch.from_numpy(img), torch.from_numpy(lab.astype(np.int64)), int(sol)))
        for i in range(spec.n_unlabeled):
            s = spec.shift if rng.random() < spec.unlabeled_test_mix else 0.0
            img, _ = _seg_image(rng, size, s, unl_f, spec.regions)
            unlabeled.append(Sample(f"unl{i:05d}", torch.from_numpy(img)))
        for i, sol in enumerate(_sols(rng, spec.n_test, TEST_SOLS)):
            img, lab = _seg_image(rng, size, spec.shift, test_f, spec.regions)
            test.append(Sample(f"tst{i:05d}", torch.from_numpy(img), torch.from_numpy(lab.astype(np.int64)), int(sol)))
        names = SEG_CLASS_NAMES
    return SynthDataset(labeled=labeled, unlabeled=unlabeled, test=test, class_names=names, spec=spec)
