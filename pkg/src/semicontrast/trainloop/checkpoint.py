"""Checkpoint container: fixed header, JSON metadata, checksummed payload.

Layout::

    b"SCTCKPT\\0" | u32 format version | u32 meta length | meta JSON | payload

``meta`` records the plan hash, epoch, stage, payload length and its
SHA-256. The payload is a ``torch.save`` archive holding model and optimizer
state, the memory bank blob and free-form extras.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from ..membank import ClassMemoryBank

MAGIC = b"SCTCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: Optional[dict]
    bank: Optional[ClassMemoryBank]
    plan_hash: str
    epoch: int
    stage: str = ""
    extra: Optional[dict] = None


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    torch.save(
        {
            "model": ckpt.model_state,
            "optimizer": ckpt.optimizer_state,
            "bank": None if ckpt.bank is None else ckpt.bank.to_bytes(),
            "extra": ckpt.extra or {},
        },
        buf,
    )
    payload = buf.getvalue()
    meta = {
        "format_version": FORMAT_VERSION,
        "plan_hash": ckpt.plan_hash,
        "epoch": int(ckpt.epoch),
        "stage": ckpt.stage,
        "payload_len": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(meta_blob)) + meta_blob + payload


def checkpoint_save(path, ckpt: Checkpoint) -> Path:
    """Write atomically so an interrupted save never clobbers the last good file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)
    return path


def parse_checkpoint(blob: bytes) -> Checkpoint:
    head = len(MAGIC) + 8
    if len(blob) < head or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint container (bad magic)")
    version, meta_len = struct.unpack_from("<II", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    try:
        meta = json.loads(blob[head : head + meta_len])
    except ValueError as exc:
        raise CheckpointError("corrupted checkpoint metadata") from exc
    payload = blob[head + meta_len :]
    if len(payload) != meta.get("payload_len") or hashlib.sha256(payload).hexdigest() != meta.get("payload_sha256"):
        raise CheckpointError("checkpoint payload checksum mismatch (file corrupted or tampered)")
    data = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    bank = None if data["bank"] is None else ClassMemoryBank.from_bytes(data["bank"])
    return Checkpoint(
        model_state=data["model"],
        optimizer_state=data["optimizer"],
        bank=bank,
        plan_hash=meta["plan_hash"],
        epoch=meta["epoch"],
        stage=meta.get("stage", ""),
        extra=data["extra"],
    )


def checkpoint_load(path, expected_plan_hash: Optional[str] = None) -> Checkpoint:
    ckpt = parse_checkpoint(Path(path).read_bytes())
    if expected_plan_hash is not None and ckpt.plan_hash != expected_plan_hash:
        raise CheckpointError(
            f"checkpoint was written for plan {ckpt.plan_hash[:12]}, current plan is {expected_plan_hash[:12]}; refusing to resume"
        )
    return ckpt
