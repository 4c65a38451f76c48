"""Three-step segmentation training.

Step 1 trains backbone and contrastive head on the memory-bank loss alone.
Step 2 adds the segmentation head and optimizes cross entropy plus the
weighted bank loss. Step 3 refreshes pseudo labels every epoch and feeds the
merged labels to the bank loss and bank pushes; cross entropy keeps using
ground truth only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .. import evalkit
from ..datapipe.augment import AugmentationPolicy, augment
from ..datapipe.labels import label_downsample
from ..losses import LossConfig, bank_contrastive_loss, combined_seg_loss, seg_cross_entropy
from ..membank import ClassMemoryBank
from ..pseudolabel import refresh_pseudo_labels
from .checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from .metrics_log import MetricsCSV
from .plan import SegPlan
from .schedules import lr_at_iter_seg

logger = logging.getLogger(__name__)

STAGES = {1: "step1", 2: "step2", 3: "step3"}
# generator stream ids
_ORDER, _AUG, _HEAD = 0, 1, 2


@dataclass
class SegData:
    labeled: list
    test: list
    num_classes: int
    class_names: tuple = field(default_factory=tuple)


def make_seg_optimizer(model, plan: SegPlan, step: int) -> torch.optim.SGD:
    """Step 1 only updates the backbone and contrastive head."""
    names = ("backbone", "contrast_head") if step == 1 else ("backbone", "seg_head", "contrast_head")
    groups = model.param_groups()
    return torch.optim.SGD(
        [{"params": groups[n], "name": n} for n in names],
        lr=plan.lr,
        momentum=plan.momentum,
        weight_decay=plan.weight_decay,
    )


def _set_lr(optimizer, lr: float):
    for g in optimizer.param_groups:
        g["lr"] = lr


def _downsample(labels: torch.Tensor, size) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(label_downsample(labels.numpy(), size)))


def seg_train_step(model, optimizer, bank: ClassMemoryBank, images, y, y_bank, step: int, cfg: LossConfig, ce_only: bool = False) -> dict:
    """One update. ``y`` drives cross entropy, ``y_bank`` the bank loss and pushes."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    with_logits = step > 1
    with_proj = not ce_only
    logits, proj = model.forward_both(images, with_logits=with_logits, with_proj=with_proj)
    ce = seg_cross_entropy(logits, y) if with_logits else None
    ls = None
    if with_proj:
        y_small = _downsample(y_bank, proj.shape[-2:])
        if step == 1 and sum(bank.counts()) == 0:
            # warm start: the very first batch seeds the bank before its own loss
            bank.push_batch_means(proj, y_small)
            ls = bank_contrastive_loss(proj, y_small, bank.snapshot_centroids(), cfg.tau_seg)
        else:
            ls = bank_contrastive_loss(proj, y_small, bank.snapshot_centroids(), cfg.tau_seg)
            bank.push_batch_means(proj, y_small)
    if step == 1:
        total = ls
    else:
        weights = cfg if with_proj else LossConfig(cfg.num_classes, cfg.tau_cls, cfg.tau_seg, cfg.lambda_s_cls, cfg.lambda_u_cls, 0.0)
        total = combined_seg_loss(ce, 0.0 if ls is None else ls, weights)
    total.backward()
    optimizer.step()
    return {
        "ce": None if ce is None else ce.item(),
        "ls": None if ls is None else ls.item(),
        "total": total.item(),
    }


@torch.no_grad()
def evaluate_segmenter(model, samples, num_classes: int, facc_mode: str = "fwiou", batch_size: int = 16):
    if not samples:
        raise ValueError("cannot evaluate on an empty split")
    was_training = model.training
    model.eval()
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        pred = model(torch.stack([s.image for s in chunk])).argmax(1)
        truth = torch.stack([torch.as_tensor(s.label) for s in chunk])
        cm += evalkit.confusion(pred.numpy().reshape(-1), truth.numpy().reshape(-1), num_classes)
    model.train(was_training)
    return evalkit.segmentation_metrics(cm, facc_mode=facc_mode)


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _reset_head(model, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(np.random.default_rng([seed, _HEAD]).integers(2**31)))
        model.reset_seg_head()


def train_segmentation(
    model,
    data: SegData,
    plan: SegPlan,
    loss_cfg: LossConfig,
    policy: AugmentationPolicy,
    seed: int,
    out_dir=None,
    plan_digest: str = "",
    resume: bool = False,
    ckpt_extra: Optional[dict] = None,
    facc_mode: str = "fwiou",
    pseudo_dump_dir=None,
) -> tuple[list[dict], ClassMemoryBank]:
    """Run the three-step schedule; returns per-epoch rows and the final bank.

    With ``plan.ce_only`` step 1 is skipped and the remaining steps optimize
    cross entropy alone, which is the supervised baseline. ``pseudo_dump_dir``
    receives one ``epochNNNN.npz`` per step-3 epoch with the merged grids and
    their source tags.
    """
    out = Path(out_dir) if out_dir is not None else None
    bank = ClassMemoryBank(data.num_classes, plan.queue_length)
    total_epochs = sum(plan.step_epochs)
    start_epoch = 0
    optimizer = None
    step = 0
    if resume:
        ckpt = checkpoint_load(out / "last.ckpt", expected_plan_hash=plan_digest)
        model.load_state_dict(ckpt.model_state)
        if ckpt.bank is not None:
            bank = ckpt.bank
        start_epoch = ckpt.epoch
        if start_epoch > 0:
            step = plan.stage_of(start_epoch)
            optimizer = make_seg_optimizer(model, plan, step)
            optimizer.load_state_dict(ckpt.optimizer_state)
    log = MetricsCSV(out / "metrics.csv", "segment", resume_epoch=start_epoch if resume else None) if out else None

    n = len(data.labeled)
    if n == 0:
        raise ValueError("segmentation training needs at least one labeled image")
    batches = (n + plan.batch_size - 1) // plan.batch_size
    ground_truth = [torch.as_tensor(s.label).long() for s in data.labeled]
    rows = []
    for epoch in range(start_epoch + 1, total_epochs + 1):
        stage = plan.stage_of(epoch)
        if plan.ce_only and stage == 1:
            continue
        if stage != step:
            step = stage
            optimizer = make_seg_optimizer(model, plan, step)
            if step == 2:
                _reset_head(model, seed)
        first_of_step = sum(plan.step_epochs[: step - 1]) + 1
        iters_total = plan.step_epochs[step - 1] * batches
        it = (epoch - first_of_step) * batches

        merged = ground_truth
        n_pseudo = 0
        if step == 3 and not plan.ce_only:
            masks = refresh_pseudo_labels(model, [(s.image, y) for s, y in zip(data.labeled, ground_truth)], plan.threshold, plan.batch_size)
            merged = [m.grid for m in masks]
            n_pseudo = sum(m.num_pseudo() for m in masks)
            if pseudo_dump_dir is not None:
                dump = Path(pseudo_dump_dir)
                dump.mkdir(parents=True, exist_ok=True)
                np.savez_compressed(
                    dump / f"epoch{epoch:04d}.npz",
                    ids=np.asarray([s.id for s in data.labeled]),
                    grid=torch.stack([m.grid for m in masks]).numpy().astype(np.uint8),
                    source=torch.stack([m.source for m in masks]).numpy(),
                )

        rng_order = np.random.default_rng([seed, epoch, _ORDER])
        rng_aug = np.random.default_rng([seed, epoch, _AUG])
        order = rng_order.permutation(n)
        epoch_lr = lr_at_iter_seg(it, iters_total, plan.lr, plan.power)
        stats = []
        for start in range(0, n, plan.batch_size):
            idx = order[start : start + plan.batch_size]
            imgs, ys, ybs = [], [], []
            for i in idx:
                img, m = augment(data.labeled[i].image, policy, rng_aug, torch.stack([ground_truth[i], merged[i]]))
                imgs.append(img)
                ys.append(m[0])
                ybs.append(m[1])
            _set_lr(optimizer, lr_at_iter_seg(it, iters_total, plan.lr, plan.power))
            stats.append(seg_train_step(model, optimizer, bank, torch.stack(imgs), torch.stack(ys), torch.stack(ybs), step, loss_cfg, plan.ce_only))
            it += 1

        report = evaluate_segmenter(model, data.test, data.num_classes, facc_mode)
        row = {
            "epoch": epoch,
            "stage": STAGES[step],
            "loss_total": _mean([s["total"] for s in stats]),
            "loss_ce": _mean([s["ce"] for s in stats]),
            "loss_s": _mean([s["ls"] for s in stats]),
            "loss_u": None,
            "lr": epoch_lr,
            **report.row(),
        }
        rows.append(row)
        logger.info("epoch %d (%s): loss %.4f miou %.4f pseudo px %d", epoch, row["stage"], row["loss_total"], row["miou"], n_pseudo)
        if out:
            log.append(row)
            checkpoint_save(out / "last.ckpt", Checkpoint(model.state_dict(), optimizer.state_dict(), bank, plan_digest, epoch, STAGES[step], ckpt_extra))
    return rows, bank
