"""Contrastive, similarity and cross-entropy objectives.

Every function is pure: tensors in, scalar tensor out. Embeddings are rows
of an ``(N, D)`` tensor, feature maps are ``(B, D, H, W)`` (a single
``(D, H, W)`` map is accepted too) and label maps are ``(B, H, W)`` integer
grids where :data:`UNLABELED` marks pixels without annotation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F

UNLABELED = 255

Centroids = Union[Sequence[Optional[torch.Tensor]], torch.Tensor]


@dataclass(frozen=True)
class LossConfig:
    num_classes: int
    tau_cls: float = 0.2
    tau_seg: float = 0.07
    lambda_s_cls: float = 1.0
    lambda_u_cls: float = 0.2
    lambda_s_seg: float = 0.001

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        for name in ("tau_cls", "tau_seg"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("lambda_s_cls", "lambda_u_cls", "lambda_s_seg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)


def _unit_rows(x: torch.Tensor, name: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError(f"{name} contains a zero-norm vector; cosine similarity is undefined")
    return x / norms


def cosine_kernel(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine similarity ``u.v / (|u| |v|)`` along the last dimension."""
    return (_unit_rows(u, "u") * _unit_rows(v, "v")).sum(-1)


def _check_tau(tau: float):
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.dim() != 2 or b.dim() != 2:
        raise ValueError("embedding batches must be 2-D (N, D)")
    if a.shape != b.shape:
        raise ValueError(f"batch shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[1] < 2:
        raise ValueError("embedding dimension must be >= 2")


def info_nce(anchor_views: torch.Tensor, partner_views: torch.Tensor, tau: float) -> torch.Tensor:
    """Sample-wise InfoNCE: row i of each batch is a view of sample i.

    The denominator runs over every partner row, the positive included.
    """
    _check_pair(anchor_views, partner_views)
    _check_tau(tau)
    n = anchor_views.shape[0]
    if n < 2:
        raise ValueError("info_nce needs at least 2 samples (no negatives otherwise)")
    logits = _unit_rows(anchor_views, "anchor_views") @ _unit_rows(partner_views, "partner_views").T / tau
    # cross_entropy is a max-shifted log-softmax
    return F.cross_entropy(logits, torch.arange(n, device=logits.device))


def _class_order(labels, name: str) -> list[int]:
    ids = [int(c) for c in labels]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate category in {name}: {ids}")
    return ids


def supervised_interclass_loss(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    tau: float,
    anchor_labels=None,
    positive_labels=None,
) -> torch.Tensor:
    """Inter-class contrastive loss over one representative per class.

    ``anchors[k]`` is view 1 of a class-``c`` image, ``positives`` holds view 2
    of a (possibly different) image of each class. Same-class pairs are never
    negatives because every class contributes exactly one denominator term.
    When labels are given the positives are re-ordered to match the anchors.
    """
    _check_pair(anchors, positives)
    _check_tau(tau)
    if anchors.shape[0] < 2:
        raise ValueError("need at least 2 classes in the batch (no inter-class negative otherwise)")
    if anchor_labels is not None or positive_labels is not None:
        if anchor_labels is None or positive_labels is None:
            raise ValueError("give both anchor_labels and positive_labels, or neither")
        a_ids = _class_order(anchor_labels, "anchors")
        p_ids = _class_order(positive_labels, "positives")
        if len(a_ids) != anchors.shape[0] or len(p_ids) != positives.shape[0]:
            raise ValueError("label count does not match row count")
        if set(a_ids) != set(p_ids):
            raise ValueError(f"category sets differ: {sorted(a_ids)} vs {sorted(p_ids)}")
        where = {c: k for k, c in enumerate(p_ids)}
        positives = positives[[where[c] for c in a_ids]]
    logits = _unit_rows(anchors, "anchors") @ _unit_rows(positives, "positives").T / tau
    return F.cross_entropy(logits, torch.arange(anchors.shape[0], device=logits.device))


def similarity_loss(view1: torch.Tensor, view2: torch.Tensor) -> torch.Tensor:
    """Negative mean cosine similarity between paired views; no negatives."""
    _check_pair(view1, view2)
    if view1.shape[0] == 0:
        raise ValueError("similarity_loss needs a non-empty batch")
    return -cosine_kernel(view1, view2).mean()


def cls_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    targets = torch.as_tensor(targets, device=logits.device).long()
    num_classes = logits.shape[-1]
    if bool(((targets < 0) | (targets >= num_classes)).any()):
        raise ValueError(f"target outside [0, {num_classes})")
    return F.cross_entropy(logits, targets)


def combined_cls_loss(ce, ls, lu, cfg: LossConfig):
    return ce + cfg.lambda_s_cls * ls + cfg.lambda_u_cls * lu


def combined_seg_loss(ce, ls, cfg: LossConfig):
    return ce + cfg.lambda_s_seg * ls


def _batched(fmap: torch.Tensor, labels: torch.Tensor):
    labels = torch.as_tensor(labels, device=fmap.device)
    if fmap.dim() == 3:
        fmap = fmap.unsqueeze(0)
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    if fmap.dim() != 4 or labels.dim() != 3:
        raise ValueError("expected feature map (B, D, H, W) and labels (B, H, W)")
    if fmap.shape[0] != labels.shape[0] or fmap.shape[2:] != labels.shape[1:]:
        raise ValueError(f"shape mismatch: features {tuple(fmap.shape)} vs labels {tuple(labels.shape)}")
    return fmap, labels.long()


def elementwise_naive_loss(fmap: torch.Tensor, labels: torch.Tensor, tau: float) -> torch.Tensor:
    """All-pairs element-wise inter-class loss within each image.

    Quadratic in the number of elements; meant as a reference on tiny grids.
    Both sums include the anchor itself. Pairs never cross images; the mean
    runs over every labeled element of the batch.
    """
    _check_tau(tau)
    fmap, labels = _batched(fmap, labels)
    terms = []
    for f, y in zip(fmap, labels):
        keep = y.reshape(-1) != UNLABELED
        if int(keep.sum()) < 2:
            raise ValueError("elementwise_naive_loss needs at least 2 labeled elements per image")
        feats = _unit_rows(f.reshape(f.shape[0], -1).T[keep], "fmap")
        cls = y.reshape(-1)[keep]
        logits = feats @ feats.T / tau
        same = cls[:, None] == cls[None, :]
        num = torch.logsumexp(logits.masked_fill(~same, -math.inf), dim=1)
        den = torch.logsumexp(logits, dim=1)
        terms.append(den - num)
    return torch.cat(terms).mean()


def _centroid_table(centroids: Centroids, num_classes: int, like: torch.Tensor):
    if isinstance(centroids, torch.Tensor):
        table = centroids.to(like)
        present = torch.ones(table.shape[0], dtype=torch.bool, device=like.device)
        return table, present
    rows, present = [], []
    for c in centroids:
        present.append(c is not None)
        rows.append(torch.zeros(like.shape[-1], dtype=like.dtype, device=like.device) if c is None else c.to(like))
    if len(rows) < num_classes:
        raise ValueError("fewer centroid slots than label ids")
    return torch.stack(rows), torch.tensor(present, device=like.device)


def bank_contrastive_loss(
    fmap: torch.Tensor,
    labels: torch.Tensor,
    centroids: Centroids,
    tau: float,
    return_count: bool = False,
):
    """Element-wise inter-class loss against per-class memory-bank centroids.

    ``centroids`` is a sequence with one optional vector per class (``None``
    for a class whose queue is still empty) or a dense ``(C, D)`` tensor.
    Centroids are treated as constants. Elements whose class has no centroid,
    and unlabeled elements, are skipped. With no eligible element the result
    is a graph-connected zero; ``return_count=True`` also returns the number of
    contributing elements so callers can detect that warm-up case.
    """
    _check_tau(tau)
    fmap, labels = _batched(fmap, labels)
    d = fmap.shape[1]
    feats = fmap.permute(0, 2, 3, 1).reshape(-1, d)
    cls = labels.reshape(-1)
    n_slots = len(centroids)
    table, present = _centroid_table(centroids, n_slots, feats)
    table = table.detach()

    labeled = cls != UNLABELED
    if bool((cls[labeled] < 0).any() or (cls[labeled] >= n_slots).any()):
        raise ValueError(f"label id outside [0, {n_slots})")
    eligible = labeled.clone()
    eligible[labeled] = present[cls[labeled]]
    count = int(eligible.sum())
    if count == 0:
        loss = fmap.sum() * 0.0
        return (loss, 0) if return_count else loss

    cols = present.nonzero().squeeze(1)
    col_of = torch.full((n_slots,), -1, dtype=torch.long, device=feats.device)
    col_of[cols] = torch.arange(cols.numel(), device=feats.device)
    anchors = _unit_rows(feats[eligible], "fmap")
    logits = anchors @ _unit_rows(table[cols], "centroids").T / tau
    loss = F.cross_entropy(logits, col_of[cls[eligible]])
    return (loss, count) if return_count else loss


def seg_cross_entropy(logit_map: torch.Tensor, labels: torch.Tensor, return_count: bool = False):
    """Per-pixel cross entropy averaged over labeled pixels only.

    ``logit_map`` is ``(B, C, H, W)`` (or ``(C, H, W)``). All-unlabeled input
    gives a graph-connected zero; see ``return_count``.
    """
    logit_map, labels = _batched(logit_map, labels)
    num_classes = logit_map.shape[1]
    labeled = labels != UNLABELED
    if bool((labels[labeled] < 0).any() or (labels[labeled] >= num_classes).any()):
        raise ValueError(f"label id outside [0, {num_classes})")
    count = int(labeled.sum())
    if count == 0:
        loss = logit_map.sum() * 0.0
    else:
        loss = F.cross_entropy(logit_map, labels, ignore_index=UNLABELED)
    return (loss, count) if return_count else loss
