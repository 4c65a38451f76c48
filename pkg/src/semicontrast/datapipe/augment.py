"""Shape and pixel augmentations, parameters drawn from an explicit generator.

Images are ``(3, H, W)`` float tensors in ``[0, 1]``; masks are ``(H, W)``
or stacked ``(K, H, W)`` integer tensors. Geometric ops hit image and mask identically, pixel ops
touch only the image.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from ..losses import UNLABELED

MAX_CROP_TRIES = 10


@dataclass(frozen=True)
class AugmentationPolicy:
    hflip_p: float = 0.5
    vflip_p: float = 0.0
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    resize: Optional[tuple[int, int]] = None
    rotation: tuple[float, float] = (-30.0, 30.0)
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    desaturate_p: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("hflip_p", "vflip_p", "blur_p", "jitter_p", "desaturate_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0.0 <= self.hue <= 0.5:
            raise ValueError("hue jitter must be in [0, 0.5]")
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise ValueError("jitter strengths must be >= 0")
        if self.blur_sigma[0] <= 0 or self.blur_sigma[0] > self.blur_sigma[1]:
            raise ValueError("blur_sigma must be a positive (low, high) range")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(hflip_p=0.0, vflip_p=0.0, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), rotation=(0.0, 0.0),
                   blur_p=0.0, jitter_p=0.0, desaturate_p=0.0)

    @classmethod
    def weak(cls) -> "AugmentationPolicy":
        """Flip plus mild crop, as used for a plain classification stream."""
        return cls(crop_scale=(0.8, 1.0), rotation=(0.0, 0.0), blur_p=0.0, jitter_p=0.0, desaturate_p=0.0)

    @classmethod
    def segmentation(cls) -> "AugmentationPolicy":
        """Flip, crop and mild jitter; no rotation so few pixels fall off the mask."""
        return cls(crop_scale=(0.5, 1.0), rotation=(0.0, 0.0), blur_p=0.0, jitter_p=0.5, desaturate_p=0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


def _crop_box(rng: np.random.Generator, height: int, width: int, policy: AugmentationPolicy):
    if policy.crop_scale == (1.0, 1.0) and policy.crop_ratio[0] == policy.crop_ratio[1]:
        return 0, 0, height, width
    area = height * width
    log_ratio = (math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1]))
    for _ in range(MAX_CROP_TRIES):
        target = area * rng.uniform(*policy.crop_scale)
        ratio = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return 0, 0, height, width


def augment(image: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator, mask: Optional[torch.Tensor] = None):
    """Apply one randomly sampled transformation chain.

    Returns the image, or ``(image, mask)`` when a mask is given.
    """
    _, height, width = image.shape
    out_size = list(policy.resize) if policy.resize else [height, width]
    m = None
    if mask is not None:
        m = torch.as_tensor(mask)
        stacked = m.dim() == 3
        m = m if stacked else m.unsqueeze(0)

    if rng.random() < policy.hflip_p:
        image = TF.horizontal_flip(image)
        m = None if m is None else TF.horizontal_flip(m)
    if rng.random() < policy.vflip_p:
        image = TF.vertical_flip(image)
        m = None if m is None else TF.vertical_flip(m)

    top, left, h, w = _crop_box(rng, height, width, policy)
    if (top, left, h, w) != (0, 0, height, width) or out_size != [height, width]:
        image = TF.resized_crop(image, top, left, h, w, out_size, antialias=True)
        if m is not None:
            m = TF.resized_crop(m, top, left, h, w, out_size, interpolation=InterpolationMode.NEAREST)

    angle = float(rng.uniform(*policy.rotation)) if policy.rotation[1] > policy.rotation[0] else float(policy.rotation[0])
    if angle != 0.0:
        image = TF.rotate(image, angle, interpolation=InterpolationMode.BILINEAR, fill=0.0)
        if m is not None:
            m = TF.rotate(m, angle, interpolation=InterpolationMode.NEAREST, fill=UNLABELED)

    if rng.random() < policy.jitter_p:
        b = rng.uniform(max(0.0, 1 - policy.brightness), 1 + policy.brightness)
        c = rng.uniform(max(0.0, 1 - policy.contrast), 1 + policy.contrast)
        s = rng.uniform(max(0.0, 1 - policy.saturation), 1 + policy.saturation)
        hue = rng.uniform(-policy.hue, policy.hue)
        image = TF.adjust_brightness(image, b)
        image = TF.adjust_contrast(image, c)
        image = TF.adjust_saturation(image, s)
        if hue != 0.0:
            image = TF.adjust_hue(image, hue)
    if rng.random() < policy.desaturate_p:
        image = TF.rgb_to_grayscale(image, num_output_channels=3)
    if rng.random() < policy.blur_p:
        sigma = float(rng.uniform(*policy.blur_sigma))
        k = max(3, 2 * int(math.ceil(2 * sigma)) + 1)
        k = min(k, 2 * ((min(image.shape[-2:]) - 1) // 2) + 1)
        image = TF.gaussian_blur(image, [k, k], [sigma, sigma])

    image = image.clamp(0.0, 1.0)
    if mask is None:
        return image
    return image, (m if stacked else m.squeeze(0))


def two_view(image: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator, mask: Optional[torch.Tensor] = None):
    """Two independent transformation chains of the same image (and mask)."""
    return augment(image, policy, rng, mask), augment(image, policy, rng, mask)


def sample_rng(base_seed: int, index: int, epoch: int = 0) -> np.random.Generator:
    """Per-sample generator so worker count never changes the draws."""
    return np.random.default_rng([base_seed, epoch, index])
