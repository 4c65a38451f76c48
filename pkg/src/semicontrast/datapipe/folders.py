"""Samples and the on-disk dataset layouts.

Classification: ``root/<class_name>/<image>`` plus ``root/sidecar.csv`` with
columns ``id,sol,class``. Segmentation: ``root/images/<id>.png`` and
``root/labels/<id>.png`` (single channel, 255 = unlabeled) plus an optional
``root/sidecar.csv`` with ``id,sol``. Unlabeled pool: a flat image directory.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
SIDECAR = "sidecar.csv"


@dataclass
class Sample:
    """One image; ``image`` is ``(3, H, W)`` float32 in ``[0, 1]``.

    ``label`` is a class id, an ``(H, W)`` label map, or ``None`` for
    unlabeled data.
    """

    id: str
    image: torch.Tensor
    label: Union[int, torch.Tensor, None] = None
    sol: Optional[int] = None


def _read_image(path: Path, size) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _read_mask(path: Path, size) -> torch.Tensor:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I"):
            raise ValueError(f"{path}: label masks must be single-channel, got mode {im.mode}")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.NEAREST)
        arr = np.asarray(im, dtype=np.int64)
    return torch.from_numpy(arr.copy())


def _write_image(path: Path, image: torch.Tensor):
    arr = (image.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def _images_in(directory: Path):
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _read_sidecar(path: Path) -> dict:
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        return {row["id"]: row for row in csv.DictReader(fh)}


def load_classification_folder(root, image_size=None):
    """Return ``(samples, class_names)``; class ids follow sorted folder names."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"classification root not found: {root}")
    meta = _read_sidecar(root / SIDECAR)
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    samples = []
    for cid, name in enumerate(class_names):
        for path in _images_in(root / name):
            row = meta.get(path.stem, {})
            sol = int(row["sol"]) if row.get("sol") not in (None, "") else None
            samples.append(Sample(id=path.stem, image=_read_image(path, image_size), label=cid, sol=sol))
    return samples, class_names


def load_segmentation_folder(root, image_size=None):
    root = Path(root)
    images, labels = root / "images", root / "labels"
    if not images.is_dir() or not labels.is_dir():
        raise FileNotFoundError(f"segmentation root needs images/ and labels/: {root}")
    meta = _read_sidecar(root / SIDECAR)
    samples = []
    for path in _images_in(images):
        mask_path = labels / (path.stem + ".png")
        if not mask_path.exists():
            logger.warning("no label mask for %s; skipped", path.name)
            continue
        row = meta.get(path.stem, {})
        sol = int(row["sol"]) if row.get("sol") not in (None, "") else None
        samples.append(Sample(id=path.stem, image=_read_image(path, image_size), label=_read_mask(mask_path, image_size), sol=sol))
    return samples


def load_unlabeled_folder(root, image_size=None):
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"unlabeled pool not found: {root}")
    return [Sample(id=p.stem, image=_read_image(p, image_size)) for p in _images_in(root)]


def write_classification_folder(samples, class_names, root):
    root = Path(root)
    for name in class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    with open(root / SIDECAR, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "sol", "class"])
        for s in samples:
            _write_image(root / class_names[s.label] / f"{s.id}.png", s.image)
            writer.writerow([s.id, "" if s.sol is None else s.sol, class_names[s.label]])


def write_segmentation_folder(samples, root):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    with open(root / SIDECAR, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "sol"])
        for s in samples:
            _write_image(root / "images" / f"{s.id}.png", s.image)
            Image.fromarray(s.label.numpy().astype(np.uint8), mode="L").save(root / "labels" / f"{s.id}.png", format="PNG")
            writer.writerow([s.id, "" if s.sol is None else s.sol])


def write_unlabeled_folder(samples, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        _write_image(root / f"{s.id}.png", s.image)
