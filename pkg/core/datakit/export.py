#!/usr/bin/env python3
"""
Distilled Dataset Export
Directory artifact consumed by the evaluation harness: images.bin,
labels.txt or soft_labels.bin, and meta.txt
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch

from core.datakit.dataset import ChannelLayout
from core.diffnet import DTYPE_TAGS, LabelMode
from core.errors import (
    ArtifactError,
    ArtifactHeaderError,
    ArtifactMissingError,
    ArtifactRowCountError,
    ShapeError,
)
from core.synthetic import SyntheticDataset

logger = logging.getLogger(__name__)

MATRIX_MAGIC = b"DIMG"
MATRIX_VERSION = 1
_HEADER = struct.Struct("<4sIIIB")

IMAGES_FILE = "images.bin"
LABELS_FILE = "labels.txt"
SOFT_LABELS_FILE = "soft_labels.bin"
META_FILE = "meta.txt"

_NUMPY_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_NATIVE_DTYPES = {4: np.float32, 8: np.float64}
_PRECISIONS = {4: "single", 8: "double"}


def write_matrix(path: Union[str, Path], matrix: torch.Tensor):
    """DIMG header followed by row-major little-endian values"""
    if matrix.dim() != 2:
        raise ShapeError(f"Only matrices can be exported, got shape {tuple(matrix.shape)}")
    tag = DTYPE_TAGS.get(matrix.dtype)
    if tag is None:
        raise ShapeError(f"Unsupported dtype {matrix.dtype}")
    values = matrix.detach().cpu().contiguous().numpy().astype(_NUMPY_DTYPES[tag], copy=False)
    header = _HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, matrix.shape[0], matrix.shape[1], tag)
    Path(path).write_bytes(header + values.tobytes())


def read_matrix(path: Union[str, Path]) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise ArtifactMissingError(f"Missing artifact file: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ArtifactHeaderError(f"{path.name}: header needs {_HEADER.size} bytes, file has {len(data)}")

    magic, version, rows, cols, tag = _HEADER.unpack_from(data)
    if magic != MATRIX_MAGIC:
        raise ArtifactHeaderError(f"{path.name}: bad magic {magic!r}")
    if version != MATRIX_VERSION:
        raise ArtifactHeaderError(f"{path.name}: unsupported version {version}")
    if tag not in _NUMPY_DTYPES:
        raise ArtifactHeaderError(f"{path.name}: unknown dtype tag {tag}")

    expected = _HEADER.size + rows * cols * tag
    if len(data) != expected:
        raise ArtifactHeaderError(f"{path.name}: expected {expected} bytes for {rows}x{cols}, got {len(data)}")
    values = np.frombuffer(data, dtype=_NUMPY_DTYPES[tag], offset=_HEADER.size).reshape(rows, cols)
    return torch.from_numpy(values.astype(_NATIVE_DTYPES[tag]))


def _float_list(values) -> str:
    return ", ".join(repr(float(v)) for v in values)


def _stats_text(stats: Optional[Tuple[float, ...]]) -> str:
    return "none" if stats is None else _float_list(stats)


def _parse_stats(text: str) -> Optional[Tuple[float, ...]]:
    if text == "none":
        return None
    return tuple(float(v) for v in text.split(","))


def export_distilled(path: Union[str, Path], syn: SyntheticDataset) -> Path:
    """Write the synthetic dataset as a directory artifact"""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)

    write_matrix(out / IMAGES_FILE, syn.images)
    if syn.label_mode is LabelMode.HARD:
        (out / LABELS_FILE).write_text("".join(f"{int(y)}\n" for y in syn.hard_labels.tolist()))
        (out / SOFT_LABELS_FILE).unlink(missing_ok=True)
    else:
        # stores the trainable logits; the audit and softmax both work from them
        write_matrix(out / SOFT_LABELS_FILE, syn.label_logits)
        (out / LABELS_FILE).unlink(missing_ok=True)

    alpha = syn.alpha.detach().reshape(-1).tolist()
    meta = {
        "classes": str(syn.num_classes),
        "ipc": str(syn.ipc),
        "mode": syn.label_mode.value,
        "precision": _PRECISIONS[DTYPE_TAGS[syn.images.dtype]],
        "per_step_alpha": "true" if syn.alpha.dim() == 1 else "false",
        "alpha": _float_list(alpha),
        "norm_mean": _stats_text(syn.norm_mean),
        "norm_std": _stats_text(syn.norm_std),
    }
    if syn.layout is not None:
        meta["channels"] = str(syn.layout.channels)
        meta["height"] = str(syn.layout.height)
        meta["width"] = str(syn.layout.width)
    (out / META_FILE).write_text("".join(f"{key} = {value}\n" for key, value in meta.items()))

    logger.debug(f"Exported {syn.rows} synthetic rows ({syn.label_mode.value} labels) to {out}")
    return out


def read_meta(path: Union[str, Path]) -> Dict[str, str]:
    meta_path = Path(path) / META_FILE
    if not meta_path.exists():
        raise ArtifactMissingError(f"Missing artifact file: {meta_path}")

    meta: Dict[str, str] = {}
    for number, raw in enumerate(meta_path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ArtifactHeaderError(f"{META_FILE} line {number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        meta[key] = value

    missing = [key for key in ("classes", "ipc", "mode", "precision", "alpha") if key not in meta]
    if missing:
        raise ArtifactHeaderError(f"{META_FILE} lacks keys: {', '.join(missing)}")
    return meta


def _meta_int(meta: Dict[str, str], key: str) -> int:
    try:
        value = int(meta[key])
    except ValueError:
        raise ArtifactHeaderError(f"{META_FILE}: {key} must be an integer, got {meta[key]!r}")
    if value < 1:
        raise ArtifactHeaderError(f"{META_FILE}: {key} must be positive, got {value}")
    return value


def read_hard_labels(path: Union[str, Path]) -> torch.Tensor:
    labels_path = Path(path) / LABELS_FILE
    if not labels_path.exists():
        raise ArtifactMissingError(f"Missing artifact file: {labels_path}")
    try:
        values = [int(line) for line in labels_path.read_text().split()]
    except ValueError:
        raise ArtifactHeaderError(f"{LABELS_FILE} must hold one integer per line")
    return torch.tensor(values, dtype=torch.long)


def import_distilled(path: Union[str, Path]) -> SyntheticDataset:
    """Inverse of export_distilled, bit-exact"""
    root = Path(path)
    if not root.is_dir():
        raise ArtifactMissingError(f"Artifact directory not found: {root}")

    meta = read_meta(root)
    classes = _meta_int(meta, "classes")
    ipc = _meta_int(meta, "ipc")
    rows = classes * ipc
    try:
        mode = LabelMode(meta["mode"])
    except ValueError:
        raise ArtifactHeaderError(f"{META_FILE}: unknown mode {meta['mode']!r}")

    images = read_matrix(root / IMAGES_FILE)
    if _PRECISIONS[DTYPE_TAGS[images.dtype]] != meta["precision"]:
        raise ArtifactHeaderError(f"{IMAGES_FILE} is {images.dtype} but meta says {meta['precision']}")
    if images.shape[0] != rows:
        raise ArtifactRowCountError(f"{IMAGES_FILE} has {images.shape[0]} rows, classes * ipc = {rows}")

    hard_labels = None
    label_logits = None
    if mode is LabelMode.HARD:
        hard_labels = read_hard_labels(root)
        if hard_labels.shape[0] != rows:
            raise ArtifactRowCountError(f"{LABELS_FILE} has {hard_labels.shape[0]} labels, classes * ipc = {rows}")
        if hard_labels.numel() and (int(hard_labels.min()) < 0 or int(hard_labels.max()) >= classes):
            raise ArtifactHeaderError(f"{LABELS_FILE} holds labels outside [0, {classes})")
    else:
        label_logits = read_matrix(root / SOFT_LABELS_FILE)
        if label_logits.shape[0] != rows:
            raise ArtifactRowCountError(f"{SOFT_LABELS_FILE} has {label_logits.shape[0]} rows, classes * ipc = {rows}")
        if label_logits.shape[1] != classes:
            raise ArtifactHeaderError(f"{SOFT_LABELS_FILE} has {label_logits.shape[1]} columns for {classes} classes")

    try:
        alpha_values = [float(v) for v in meta["alpha"].split(",")]
        norm_mean = _parse_stats(meta.get("norm_mean", "none"))
        norm_std = _parse_stats(meta.get("norm_std", "none"))
    except ValueError as e:
        raise ArtifactHeaderError(f"{META_FILE}: malformed number ({e})")
    alpha = torch.tensor(alpha_values, dtype=images.dtype)
    if meta.get("per_step_alpha", "false") != "true":
        if alpha.numel() != 1:
            raise ArtifactHeaderError(f"{META_FILE}: expected one alpha, got {alpha.numel()}")
        alpha = alpha.reshape(())

    layout = None
    if all(key in meta for key in ("channels", "height", "width")):
        layout = ChannelLayout(_meta_int(meta, "channels"), _meta_int(meta, "height"), _meta_int(meta, "width"))

    try:
        return SyntheticDataset(
            images=images,
            label_mode=mode,
            num_classes=classes,
            ipc=ipc,
            alpha=alpha,
            hard_labels=hard_labels,
            label_logits=label_logits,
            layout=layout,
            norm_mean=norm_mean,
            norm_std=norm_std,
        )
    except ShapeError as e:
        raise ArtifactError(f"Artifact at {root} is inconsistent: {e}")
