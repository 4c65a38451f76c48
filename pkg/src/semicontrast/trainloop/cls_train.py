"""Three-stream classification training: CE, inter-class contrast, similarity."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .. import evalkit
from ..datapipe.augment import AugmentationPolicy, augment
from ..datapipe.sampling import class_balanced_batch
from ..losses import LossConfig, cls_cross_entropy, combined_cls_loss, similarity_loss, supervised_interclass_loss
from .checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from .metrics_log import MetricsCSV
from .plan import ClsPlan
from .schedules import lr_at_epoch_cls

logger = logging.getLogger(__name__)

# stream ids for per-epoch generator derivation
_CE, _S, _U = 0, 1, 2


@dataclass
class ClsData:
    labeled: list
    unlabeled: list
    test: list
    num_classes: int
    class_names: tuple = field(default_factory=tuple)


def make_optimizer(model, plan: ClsPlan) -> torch.optim.Adam:
    groups = [
        {"params": params, "lr": plan.lrs[name], "name": name, "base_lr": plan.lrs[name]}
        for name, params in model.param_groups().items()
    ]
    return torch.optim.Adam(groups, weight_decay=plan.weight_decay)


def set_epoch_lr(optimizer, plan: ClsPlan, epoch: int):
    """``epoch`` is 0-based."""
    for g in optimizer.param_groups:
        g["lr"] = lr_at_epoch_cls(epoch, g["base_lr"], plan.milestones, plan.gamma)


def cls_train_step(model, optimizer, labeled_batch, pair_batch, unlabeled_batch, cfg: LossConfig) -> dict:
    """One optimizer update on the summed three-stream objective.

    ``labeled_batch`` is ``(images, targets)``; ``pair_batch`` is
    ``(anchor_images, positive_images)`` with row k of both showing class
    k of the balanced draw; ``unlabeled_batch`` is ``(view1, view2)``.
    Streams whose weight is zero are not evaluated. An empty unlabeled
    batch drops the similarity term for this step.
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    images, targets = labeled_batch
    ce = cls_cross_entropy(model(images), targets)
    ls = lu = None
    lam_u = cfg.lambda_u_cls
    if cfg.lambda_s_cls > 0 and pair_batch is not None:
        anchors, positives = pair_batch
        z = model.proj_s(model.features(torch.cat([anchors, positives])))
        ls = supervised_interclass_loss(z[: len(anchors)], z[len(anchors):], cfg.tau_cls)
    if lam_u > 0:
        if unlabeled_batch is None or len(unlabeled_batch[0]) == 0:
            logger.warning("unlabeled pool is empty; similarity term skipped for this step")
            lam_u = 0.0
        else:
            v1, v2 = unlabeled_batch
            z = model.proj_u(model.features(torch.cat([v1, v2])))
            lu = similarity_loss(z[: len(v1)], z[len(v1):])
    weights = LossConfig(cfg.num_classes, cfg.tau_cls, cfg.tau_seg, cfg.lambda_s_cls, lam_u, cfg.lambda_s_seg)
    total = combined_cls_loss(ce, 0.0 if ls is None else ls, 0.0 if lu is None else lu, weights)
    total.backward()
    optimizer.step()
    return {
        "ce": ce.item(),
        "ls": None if ls is None else ls.item(),
        "lu": None if lu is None else lu.item(),
        "total": total.item(),
    }


def _aug_stack(images, policy, rng):
    return torch.stack([augment(img, policy, rng) for img in images])


@torch.no_grad()
def evaluate_classifier(model, samples, num_classes: int, batch_size: int = 64):
    if not samples:
        raise ValueError("cannot evaluate on an empty split")
    was_training = model.training
    model.eval()
    preds, truth = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        preds.append(model(torch.stack([s.image for s in chunk])).argmax(1))
        truth.extend(int(s.label) for s in chunk)
    model.train(was_training)
    cm = evalkit.confusion(torch.cat(preds).numpy(), np.asarray(truth), num_classes)
    return evalkit.classification_report(cm)


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def train_classification(
    model,
    data: ClsData,
    plan: ClsPlan,
    loss_cfg: LossConfig,
    strong: AugmentationPolicy,
    weak: AugmentationPolicy,
    seed: int,
    out_dir=None,
    plan_digest: str = "",
    resume: bool = False,
    ckpt_extra: Optional[dict] = None,
    log_every_epoch: bool = True,
) -> list[dict]:
    """Run the full classification schedule; returns the per-epoch rows.

    With ``out_dir`` set, rows go to ``metrics.csv`` and the latest state to
    ``last.ckpt`` after every epoch. ``resume`` continues from that file.
    """
    optimizer = make_optimizer(model, plan)
    start_epoch = 0
    out = Path(out_dir) if out_dir is not None else None
    if resume:
        ckpt = checkpoint_load(out / "last.ckpt", expected_plan_hash=plan_digest)
        model.load_state_dict(ckpt.model_state)
        optimizer.load_state_dict(ckpt.optimizer_state)
        start_epoch = ckpt.epoch
    log = MetricsCSV(out / "metrics.csv", "classify", resume_epoch=start_epoch if resume else None) if out else None

    labels = np.asarray([s.label for s in data.labeled])
    rows = []
    for epoch in range(start_epoch, plan.epochs):
        set_epoch_lr(optimizer, plan, epoch)
        rng_ce = np.random.default_rng([seed, epoch, _CE])
        rng_s = np.random.default_rng([seed, epoch, _S])
        rng_u = np.random.default_rng([seed, epoch, _U])
        order = rng_ce.permutation(len(data.labeled))
        stats = []
        for start in range(0, len(order), plan.batch_size):
            idx = order[start : start + plan.batch_size]
            imgs = _aug_stack([data.labeled[i].image for i in idx], weak, rng_ce)
            targets = torch.as_tensor(labels[idx])
            pair = None
            if loss_cfg.lambda_s_cls > 0:
                _, a_idx, p_idx = class_balanced_batch(labels, rng_s)
                pair = (
                    _aug_stack([data.labeled[i].image for i in a_idx], strong, rng_s),
                    _aug_stack([data.labeled[i].image for i in p_idx], strong, rng_s),
                )
            unl = None
            if loss_cfg.lambda_u_cls > 0 and data.unlabeled:
                u_idx = rng_u.choice(len(data.unlabeled), size=min(plan.unlabeled_batch_size, len(data.unlabeled)), replace=False)
                src = [data.unlabeled[i].image for i in u_idx]
                unl = (_aug_stack(src, strong, rng_u), _aug_stack(src, strong, rng_u))
            stats.append(cls_train_step(model, optimizer, (imgs, targets), pair, unl, loss_cfg))

        report = evaluate_classifier(model, data.test, data.num_classes)
        row = {
            "epoch": epoch + 1,
            "stage": "cls",
            "loss_total": _mean([s["total"] for s in stats]),
            "loss_ce": _mean([s["ce"] for s in stats]),
            "loss_s": _mean([s["ls"] for s in stats]),
            "loss_u": _mean([s["lu"] for s in stats]),
            "lr": optimizer.param_groups[[g["name"] for g in optimizer.param_groups].index("cls_head")]["lr"],
            **report.row(),
        }
        rows.append(row)
        if log_every_epoch:
            logger.info("epoch %d: loss %.4f top1 %.4f", epoch + 1, row["loss_total"], row["top1"])
        if out:
            log.append(row)
            checkpoint_save(out / "last.ckpt", Checkpoint(model.state_dict(), optimizer.state_dict(), None, plan_digest, epoch + 1, "cls", ckpt_extra))
    return rows
