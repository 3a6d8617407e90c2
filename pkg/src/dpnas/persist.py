"""Integrity-checked binary containers (torch.save payload + sha256)."""

from __future__ import annotations

import hashlib
import io
import os
from pathlib import Path

import torch

from .errors import CheckpointIntegrityError

_MAGIC = b"DPNASPK1"


def write_container(path, obj) -> None:
    """Atomic write: magic + sha256(payload) + payload, temp-then-rename."""
    buf = io.BytesIO()
    torch.save(obj, buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC + digest + payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_container(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointIntegrityError(f"cannot read {path}: {exc}") from exc
    if len(raw) < len(_MAGIC) + 32 or not raw.startswith(_MAGIC):
        raise CheckpointIntegrityError(f"{path}: not a recognized container")
    digest, payload = raw[len(_MAGIC):len(_MAGIC) + 32], raw[len(_MAGIC) + 32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch, refusing to load")
    try:
        return torch.load(io.BytesIO(payload), weights_only=False)
    except Exception as exc:
        raise CheckpointIntegrityError(f"{path}: payload corrupt: {exc}") from exc
