"""
Binary checkpoint files.

Layout (all integers little-endian):

    8 bytes   magic b"DMCKV\\x00CK"
    u32       manifest length in bytes
    ...       UTF-8 JSON `CheckpointManifest`
    ...       payload: every array as float32, in manifest order

See docs/checkpoint_format.md for the field list.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from app.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    CorruptCheckpointError,
    TruncatedCheckpointError,
)
from core.dtos import ArrayEntry, CheckpointManifest
from core.model.checkpoint import FORMAT_VERSION, STORED_DTYPE, Checkpoint, snapshot
from core.model.transformer import TransformerLM
from core.model.weights import check_shapes

logger = logging.getLogger(__name__)

MAGIC = b"DMCKV\x00CK"
_HEADER = struct.Struct("<8sI")
_STORED = STORED_DTYPE


def encode(checkpoint: Checkpoint) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in checkpoint.arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_STORED).tobytes()
        entries.append(ArrayEntry(name=name, shape=list(arr.shape), offset=offset, nbytes=len(raw)))
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = checkpoint.manifest.model_copy(
        update={
            "arrays": entries,
            "payload_bytes": len(payload),
            "payload_crc32": zlib.crc32(payload),
        }
    )
    header = manifest.model_dump_json().encode("utf-8")
    return _HEADER.pack(MAGIC, len(header)) + header + payload


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < _HEADER.size:
        raise TruncatedCheckpointError(f"file holds {len(blob)} bytes, header needs {_HEADER.size}")
    magic, header_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic)")
    start = _HEADER.size
    if len(blob) < start + header_len:
        raise TruncatedCheckpointError("manifest is cut short")
    try:
        raw_manifest = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError("manifest is not valid JSON") from e

    version = raw_manifest.get("format_version") if isinstance(raw_manifest, dict) else None
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint format version {version!r}",
            details={"supported": FORMAT_VERSION},
        )
    try:
        manifest = CheckpointManifest.model_validate(raw_manifest)
    except PydanticValidationError as e:
        raise CorruptCheckpointError("manifest does not validate", details=str(e)) from e

    payload = blob[start + header_len :]
    if len(payload) < manifest.payload_bytes:
        raise TruncatedCheckpointError(
            f"payload holds {len(payload)} of {manifest.payload_bytes} bytes"
        )
    if len(payload) > manifest.payload_bytes:
        raise CorruptCheckpointError("trailing bytes after the payload")
    if zlib.crc32(payload) != manifest.payload_crc32:
        raise CorruptCheckpointError("payload checksum mismatch")

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest.arrays:
        count = int(np.prod(entry.shape, dtype=np.int64))
        if entry.nbytes != count * _STORED.itemsize:
            raise CheckpointShapeError(
                f"{entry.name}: {entry.nbytes} bytes for shape {entry.shape}"
            )
        arr = np.frombuffer(payload, dtype=_STORED, count=count, offset=entry.offset)
        arrays[entry.name] = arr.reshape(entry.shape).astype(np.float32)
    check_shapes(manifest.model, arrays)
    return Checkpoint(manifest, arrays)


def checkpoint_save(checkpoint: Checkpoint | TransformerLM, path: str | Path, **meta: Any) -> Path:
    """Write atomically (temp file + rename); a model is snapshotted first."""
    if isinstance(checkpoint, TransformerLM):
        checkpoint = snapshot(checkpoint, **meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(checkpoint))
    os.replace(tmp, path)
    logger.info(
        "saved checkpoint %s (phase=%s step=%d)",
        path,
        checkpoint.manifest.phase.value,
        checkpoint.manifest.step,
    )
    return path


def checkpoint_load(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode(blob)


class CheckpointRepo:
    """Checkpoints stored under one directory, addressed by file name."""

    suffix = ".dmckpt"

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def path_for(self, name: str) -> Path:
        name = name if name.endswith(self.suffix) else name + self.suffix
        return self.root / name

    def save(self, checkpoint: Checkpoint, name: str) -> Path:
        return checkpoint_save(checkpoint, self.path_for(name))

    def load(self, name_or_path: str | Path) -> Checkpoint:
        candidate = Path(name_or_path)
        if not candidate.exists():
            candidate = self.path_for(str(name_or_path))
        return checkpoint_load(candidate)

    def list(self) -> list[Path]:
        if not self.root.exists():
            return []
        return sorted(self.root.glob(f"*{self.suffix}"))
