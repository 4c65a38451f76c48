"""Per-class FIFO memory bank of historical mean features."""
from __future__ import annotations

import struct
from collections import deque
from typing import Optional

import numpy as np
import torch

from .losses import UNLABELED

_MAGIC = b"CMB1"
_DTYPES = {0: torch.float32, 1: torch.float64}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class ClassQueue:
    def __init__(self, capacity: int = 32):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.entries: deque[torch.Tensor] = deque(maxlen=capacity)

    def push(self, mean: torch.Tensor):
        if self.entries and mean.shape != self.entries[0].shape:
            raise ValueError("entry dimension differs from queue contents")
        self.entries.append(mean.detach().clone())

    def mean(self) -> Optional[torch.Tensor]:
        if not self.entries:
            return None
        return torch.stack(list(self.entries)).mean(0)

    def __len__(self):
        return len(self.entries)


class ClassMemoryBank:
    """``C`` bounded queues; queue ``c`` stores per-image means of class-``c`` features.

    Queues start empty, and a class without entries yields no centroid.
    """

    def __init__(self, num_classes: int, capacity: int = 32):
        if num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {num_classes}")
        self.num_classes = num_classes
        self.capacity = capacity
        self.queues = [ClassQueue(capacity) for _ in range(num_classes)]

    @torch.no_grad()
    def push_batch_means(self, fmap: torch.Tensor, labels: torch.Tensor) -> "ClassMemoryBank":
        """Append, per image and per present class, the mean labeled feature.

        ``fmap`` is ``(B, D, H, W)`` or ``(D, H, W)``; ``labels`` matches its
        spatial shape. Unlabeled elements never contribute.
        """
        fmap = fmap.detach()
        labels = torch.as_tensor(labels, device=fmap.device)
        if fmap.dim() == 3:
            fmap, labels = fmap.unsqueeze(0), labels.unsqueeze(0)
        if fmap.shape[0] != labels.shape[0] or fmap.shape[2:] != labels.shape[1:]:
            raise ValueError(f"shape mismatch: features {tuple(fmap.shape)} vs labels {tuple(labels.shape)}")
        labels = labels.long()
        valid = (labels == UNLABELED) | ((labels >= 0) & (labels < self.num_classes))
        if not bool(valid.all()):
            raise ValueError(f"label id outside [0, {self.num_classes}) and not UNLABELED")
        d = fmap.shape[1]
        for f, y in zip(fmap, labels):
            flat = f.reshape(d, -1)
            ids = y.reshape(-1)
            for c in torch.unique(ids).tolist():
                if c == UNLABELED:
                    continue
                self.queues[c].push(flat[:, ids == c].mean(1))
        return self

    def snapshot_centroids(self) -> list[Optional[torch.Tensor]]:
        """Independent copies of each queue's mean; ``None`` for empty queues."""
        return [q.mean() for q in self.queues]

    def counts(self) -> list[int]:
        return [len(q) for q in self.queues]

    def _dim_dtype(self):
        for q in self.queues:
            if q.entries:
                return q.entries[0].shape[0], q.entries[0].dtype
        return 0, torch.float32

    def to_bytes(self) -> bytes:
        """Serialize: header, then per class the entry count and row-major entries."""
        dim, dtype = self._dim_dtype()
        out = [_MAGIC, struct.pack("<IIIB", self.num_classes, self.capacity, dim, _DTYPE_CODES[dtype])]
        np_dtype = "<f4" if dtype == torch.float32 else "<f8"
        for q in self.queues:
            out.append(struct.pack("<I", len(q)))
            if q.entries:
                out.append(torch.stack(list(q.entries)).cpu().numpy().astype(np_dtype).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ClassMemoryBank":
        if blob[:4] != _MAGIC:
            raise ValueError("not a memory-bank blob")
        num_classes, capacity, dim, code = struct.unpack_from("<IIIB", blob, 4)
        if code not in _DTYPES:
            raise ValueError(f"unknown dtype code {code}")
        np_dtype = "<f4" if code == 0 else "<f8"
        item = np.dtype(np_dtype).itemsize
        bank = cls(num_classes, capacity)
        pos = 4 + struct.calcsize("<IIIB")
        for q in bank.queues:
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if n > capacity:
                raise ValueError("queue length exceeds capacity")
            if n:
                rows = np.frombuffer(blob, dtype=np_dtype, count=n * dim, offset=pos).reshape(n, dim)
                pos += n * dim * item
                for r in rows:
                    q.entries.append(torch.from_numpy(r.astype(np_dtype, copy=True)).to(_DTYPES[code]))
        if pos != len(blob):
            raise ValueError("trailing bytes in memory-bank blob")
        return bank
