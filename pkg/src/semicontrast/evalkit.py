"""Confusion-matrix metrics and feature export."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .losses import UNLABELED

FACC_MODES = ("fwiou", "literal")


def confusion(pred, true, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions. UNLABELED truths are dropped."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    keep = true != UNLABELED
    pred, true = pred[keep], true[keep]
    if ((true < 0) | (true >= num_classes)).any():
        raise ValueError(f"ground-truth id outside [0, {num_classes})")
    if ((pred < 0) | (pred >= num_classes)).any():
        raise ValueError(f"predicted id outside [0, {num_classes})")
    return np.bincount(true * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.full(num.shape, np.nan)
    np.divide(num, den, out=out, where=den > 0)
    return out


def classification_metrics(cm: np.ndarray) -> tuple[float, np.ndarray]:
    """Top-1 and per-class accuracy; classes without test samples are NaN."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    per_class = _safe_div(np.diag(cm).astype(float), cm.sum(1).astype(float))
    return float(np.trace(cm) / total), per_class


@dataclass
class MetricReport:
    top1: Optional[float] = None
    per_class_acc: Optional[np.ndarray] = None
    acc: Optional[float] = None
    macc: Optional[float] = None
    facc: Optional[float] = None
    miou: Optional[float] = None
    per_class_iou: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        """Scalar fields for the metrics CSV: ``top1`` for images, ``acc`` for pixels."""
        head = {"top1": self.top1} if self.top1 is not None else {"acc": self.acc}
        return {**head, "macc": self.macc, "facc": self.facc, "miou": self.miou}

    def summary(self, per_class: bool = False, class_names=None) -> str:
        lines = []
        for name in ("top1", "acc", "macc", "facc", "miou"):
            value = getattr(self, name)
            if value is not None:
                lines.append(f"{name:>6}: {100 * value:6.2f}%")
        if per_class:
            vectors = [("acc", self.per_class_acc), ("iou", self.per_class_iou)]
            n = max(len(v) for _, v in vectors if v is not None)
            names = class_names or [str(c) for c in range(n)]
            lines.append("class".ljust(20) + "".join(f"{k:>10}" for k, v in vectors if v is not None))
            for c in range(n):
                cells = [v[c] for _, v in vectors if v is not None]
                lines.append(str(names[c]).ljust(20) + "".join("       n/a" if np.isnan(x) else f"{100 * x:9.2f}%" for x in cells))
        return "\n".join(lines)


def classification_report(cm: np.ndarray) -> MetricReport:
    top1, per_class = classification_metrics(cm)
    macc = float(np.nanmean(per_class)) if np.isfinite(per_class).any() else None
    return MetricReport(top1=top1, per_class_acc=per_class, macc=macc)


def segmentation_metrics(cm: np.ndarray, facc_mode: str = "fwiou") -> MetricReport:
    """Pixel ACC, class-mean recall (MACC), FACC, mIoU and per-class IoU.

    ``facc_mode="fwiou"`` weights per-class IoU by ground-truth frequency.
    ``"literal"`` weights per-class recall by frequency, which is
    algebraically the same number as ACC.
    """
    if facc_mode not in FACC_MODES:
        raise ValueError(f"facc_mode must be one of {FACC_MODES}")
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("no labeled pixels to evaluate")
    tp = np.diag(cm).astype(float)
    support = cm.sum(1).astype(float)
    union = support + cm.sum(0) - tp
    recall = _safe_div(tp, support)
    iou = _safe_div(tp, union)
    freq = support / total
    has = support > 0
    if facc_mode == "fwiou":
        facc = float((freq[has] * iou[has]).sum())
    else:
        facc = float((freq[has] * recall[has]).sum())
    return MetricReport(
        acc=float(tp.sum() / total),
        macc=float(recall[has].mean()),
        facc=facc,
        miou=float(np.nanmean(iou)),
        per_class_acc=recall,
        per_class_iou=iou,
    )


def _format_rows(rows) -> str:
    buf = io.StringIO()
    for sid, label, vec in rows:
        buf.write(f"{sid},{label}," + ",".join(f"{x:.8e}" for x in vec) + "\n")
    return buf.getvalue()


@torch.no_grad()
def export_features(model, dataset, stride: int = 1, path=None, batch_size: int = 16) -> str:
    """Write backbone features with labels as CSV text: ``id,label,f0..f{D-1}``.

    ``dataset`` yields ``(sample_id, image, label)``. ``label`` is an int
    for classification (one row per image) or a label map for segmentation,
    in which case each backbone-grid element kept by ``stride`` becomes a row
    with id ``<sample_id>:<row>:<col>``. ``model.features(images)`` must
    return ``(B, D)`` or ``(B, D, h, w)``.
    """
    from .datapipe.labels import label_downsample

    if stride < 1:
        raise ValueError("stride must be >= 1")
    was_training = model.training
    model.eval()
    rows = []
    header_dim = None
    try:
        for start in range(0, len(dataset), batch_size):
            items = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
            images = torch.stack([torch.as_tensor(img) for _, img, _ in items])
            feats = model.features(images).double().cpu()
            header_dim = feats.shape[1]
            for (sid, _, label), f in zip(items, feats):
                if f.dim() == 1:
                    rows.append((sid, int(label), f.tolist()))
                    continue
                grid = label_downsample(np.asarray(label), f.shape[1:])
                for i in range(0, f.shape[1], stride):
                    for j in range(0, f.shape[2], stride):
                        rows.append((f"{sid}:{i}:{j}", int(grid[i, j]), f[:, i, j].tolist()))
    finally:
        model.train(was_training)
    header = "id,label," + ",".join(f"f{k}" for k in range(header_dim or 0)) + "\n"
    text = header + _format_rows(rows)
    if path is not None:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    return text
