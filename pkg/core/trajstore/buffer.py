#!/usr/bin/env python3
"""
Trajectory Buffer Files
Little-endian TRJB container: header, metadata, snapshots, trailing CRC32
"""

import json
import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch

from core.errors import (
    BufferChecksumError,
    BufferFormatError,
    BufferMagicError,
    BufferTruncatedError,
    BufferVersionError,
)
from core.trajstore.trajectory import Trajectory, TrajectoryMeta

logger = logging.getLogger(__name__)

BUFFER_MAGIC = b"TRJB"
BUFFER_VERSION = 1
BUFFER_SUFFIX = ".trjb"

_VALUE_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_NATIVE_DTYPES = {4: np.float32, 8: np.float64}


def _block(text: str) -> bytes:
    encoded = text.encode("utf-8")
    return struct.pack("<I", len(encoded)) + encoded


def encode_buffer(traj: Trajectory) -> bytes:
    meta = traj.meta
    tag = meta.dtype_tag
    if tag not in _VALUE_DTYPES:
        raise BufferFormatError(f"Unsupported dtype tag {tag}")

    parts = [
        BUFFER_MAGIC,
        struct.pack("<I", BUFFER_VERSION),
        _block(meta.spec_digest),
        _block(meta.dataset_digest),
        struct.pack("<QIQB", meta.seed, meta.epochs, traj.param_count, tag),
        _block(json.dumps(meta.training, sort_keys=True)),
    ]
    for snapshot in traj.snapshots:
        parts.append(snapshot.detach().cpu().contiguous().numpy().astype(_VALUE_DTYPES[tag], copy=False).tobytes())

    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def write_buffer(traj: Trajectory, path: Union[str, Path]) -> Path:
    """Atomic write: temp file in the same directory, then rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    tmp_path.write_bytes(encode_buffer(traj))
    os.replace(tmp_path, path)
    logger.debug(f"Trajectory buffer written: {path}")
    return path


class _Reader:
    """Cursor over the buffer bytes that reports truncation precisely"""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise BufferTruncatedError(expected=end, actual=len(self.data))
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (length,) = self.unpack("<I")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise BufferFormatError(f"Metadata block is not UTF-8: {e}")


def decode_buffer(data: bytes) -> Trajectory:
    if data[:len(BUFFER_MAGIC)] != BUFFER_MAGIC:
        if len(data) < len(BUFFER_MAGIC) and BUFFER_MAGIC.startswith(data):
            raise BufferTruncatedError(expected=len(BUFFER_MAGIC), actual=len(data))
        raise BufferMagicError(f"Bad magic {data[:len(BUFFER_MAGIC)]!r}, expected {BUFFER_MAGIC!r}")

    reader = _Reader(data)
    reader.take(len(BUFFER_MAGIC))
    (version,) = reader.unpack("<I")
    if version != BUFFER_VERSION:
        raise BufferVersionError(f"Unsupported buffer version {version}")

    spec_digest = reader.text()
    dataset_digest = reader.text()
    seed, epochs, param_count, tag = reader.unpack("<QIQB")
    if tag not in _VALUE_DTYPES:
        raise BufferFormatError(f"Unknown dtype tag {tag}")
    training_text = reader.text()

    snapshot_bytes = param_count * tag
    expected = reader.offset + (epochs + 1) * snapshot_bytes + 4
    if len(data) < expected:
        raise BufferTruncatedError(expected=expected, actual=len(data))
    if len(data) > expected:
        raise BufferFormatError(f"{len(data) - expected} unexpected trailing bytes")

    (stored_crc,) = struct.unpack_from("<I", data, expected - 4)
    actual_crc = zlib.crc32(data[:expected - 4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise BufferChecksumError(f"CRC32 mismatch: stored {stored_crc:08x}, computed {actual_crc:08x}")

    try:
        training: Dict[str, Any] = json.loads(training_text)
    except json.JSONDecodeError as e:
        raise BufferFormatError(f"Training record is not valid JSON: {e}")

    values = np.frombuffer(data, dtype=_VALUE_DTYPES[tag], count=(epochs + 1) * param_count, offset=reader.offset)
    values = values.astype(_NATIVE_DTYPES[tag]).reshape(epochs + 1, param_count)
    snapshots = [torch.from_numpy(row.copy()) for row in values]

    meta = TrajectoryMeta(
        seed=seed,
        spec_digest=spec_digest,
        dataset_digest=dataset_digest,
        epochs=epochs,
        dtype_tag=tag,
        training=training,
    )
    return Trajectory(snapshots, meta)


def read_buffer(path: Union[str, Path]) -> Trajectory:
    """Parse a buffer file; any defect raises before a Trajectory exists"""
    path = Path(path)
    return decode_buffer(path.read_bytes())


def buffer_header(path: Union[str, Path], traj: Optional[Trajectory] = None) -> Dict[str, Any]:
    """Summary fields for inspection"""
    path = Path(path)
    traj = traj or read_buffer(path)
    meta = traj.meta
    return {
        "path": str(path),
        "version": BUFFER_VERSION,
        "seed": meta.seed,
        "epochs": meta.epochs,
        "params": traj.param_count,
        "dtype_tag": meta.dtype_tag,
        "spec_digest": meta.spec_digest,
        "dataset_digest": meta.dataset_digest,
        "bytes": path.stat().st_size,
    }
