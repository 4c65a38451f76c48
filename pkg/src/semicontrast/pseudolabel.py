"""Online pseudo labels: confident predictions fill in unlabeled pixels."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import IntEnum

import torch

from .losses import UNLABELED

logger = logging.getLogger(__name__)

SWEEP_THRESHOLDS = (0.99, 0.9, 0.7, 0.5)


class Source(IntEnum):
    NONE = 0
    GROUND_TRUTH = 1
    PSEUDO = 2


@dataclass(frozen=True)
class ConfidenceMap:
    probs: torch.Tensor  # (..., C, H, W)
    argmax: torch.Tensor  # (..., H, W)
    maxprob: torch.Tensor  # (..., H, W)


@dataclass(frozen=True)
class PseudoLabelMask:
    grid: torch.Tensor
    source: torch.Tensor

    def num_pseudo(self) -> int:
        return int((self.source == Source.PSEUDO).sum())


@torch.no_grad()
def confidence_from_logits(logit_map: torch.Tensor) -> ConfidenceMap:
    """Softmax over the class axis (``-3``); ties resolve to the smaller class id."""
    probs = torch.softmax(logit_map.double(), dim=-3).to(logit_map.dtype)
    # torch.max returns the first maximal index
    maxprob, argmax = probs.max(dim=-3)
    return ConfidenceMap(probs=probs, argmax=argmax, maxprob=maxprob)


def merge_labels(y: torch.Tensor, conf: ConfidenceMap, threshold: float) -> PseudoLabelMask:
    """Fill UNLABELED pixels of ``y`` whose confidence reaches ``threshold``.

    Ground-truth pixels are never overridden. A threshold above 1 disables
    pseudo labeling entirely.
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    y = torch.as_tensor(y)
    if y.shape != conf.argmax.shape:
        raise ValueError(f"shape mismatch: labels {tuple(y.shape)} vs predictions {tuple(conf.argmax.shape)}")
    y = y.to(conf.argmax.device).long()
    labeled = y != UNLABELED
    confident = ~labeled & (conf.maxprob >= threshold)
    grid = torch.where(confident, conf.argmax, y)
    source = torch.full_like(y, int(Source.NONE), dtype=torch.uint8)
    source[labeled] = int(Source.GROUND_TRUTH)
    source[confident] = int(Source.PSEUDO)
    return PseudoLabelMask(grid=grid, source=source)


@torch.no_grad()
def refresh_pseudo_labels(model, dataset, threshold: float, batch_size: int = 16) -> list[PseudoLabelMask]:
    """Predict every image of ``dataset`` with ``model`` and merge with its labels.

    ``dataset`` yields ``(image, label_map)`` pairs, images unaugmented.
    ``model(images)`` must return full-resolution logits ``(B, C, H, W)``.
    Masks from earlier calls are not reused. An image whose inference fails
    keeps its ground truth only, and a warning is logged.
    """
    was_training = model.training
    model.eval()
    masks: list[PseudoLabelMask] = []
    try:
        for start in range(0, len(dataset), batch_size):
            items = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
            images = torch.stack([torch.as_tensor(img) for img, _ in items])
            labels = torch.stack([torch.as_tensor(lab) for _, lab in items])
            try:
                logits = model(images)
                batch_masks = [merge_labels(labels[k], confidence_from_logits(logits[k]), threshold) for k in range(len(items))]
            except Exception as exc:  # noqa: BLE001
                batch_masks = []
                for k, (img, lab) in enumerate(items):
                    try:
                        logit = model(torch.as_tensor(img).unsqueeze(0))[0]
                        batch_masks.append(merge_labels(lab, confidence_from_logits(logit), threshold))
                    except Exception as inner:  # noqa: BLE001
                        logger.warning("pseudo-label inference failed for image %d: %s", start + k, inner)
                        lab = torch.as_tensor(lab).long()
                        source = torch.where(lab != UNLABELED, int(Source.GROUND_TRUTH), int(Source.NONE)).to(torch.uint8)
                        batch_masks.append(PseudoLabelMask(grid=lab, source=source))
                logger.debug("batch inference failed (%s); fell back to per-image", exc)
            masks.extend(batch_masks)
    finally:
        model.train(was_training)
    return masks
