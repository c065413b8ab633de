#!/usr/bin/env python3
"""
Toy Dataset Generation and Normalization
Seeded Gaussian-blob "images" standing in for the real training set
"""

import hashlib
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from core.errors import NormalizationError, ShapeError, ToySpecError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelLayout:
    """How a flat row folds into (channels, height, width)"""
    channels: int
    height: int
    width: int

    @property
    def input_dim(self) -> int:
        return self.channels * self.height * self.width

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass
class Dataset:
    """Labelled inputs, rows flattened channel-major"""
    inputs: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    layout: ChannelLayout
    norm_mean: Optional[Tuple[float, ...]] = None
    norm_std: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.inputs.dim() != 2 or self.inputs.shape[1] != self.layout.input_dim:
            raise ShapeError(f"Inputs {tuple(self.inputs.shape)} do not fit layout {self.layout}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError(f"Expected {self.inputs.shape[0]} labels, got {tuple(self.labels.shape)}")
        if self.labels.numel() and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise ShapeError(f"Labels must lie in [0, {self.num_classes})")
        empty = [c for c, n in enumerate(self.class_counts()) if n == 0]
        if empty:
            raise ShapeError(f"Classes without samples: {empty}")
        if not bool(torch.isfinite(self.inputs).all()):
            raise ShapeError("Dataset inputs contain non-finite values")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def normalized(self) -> bool:
        return self.norm_mean is not None

    def class_counts(self) -> list:
        return torch.bincount(self.labels, minlength=self.num_classes).tolist()

    def class_indices(self, class_index: int) -> np.ndarray:
        return np.flatnonzero(self.labels.cpu().numpy() == class_index)

    def astype(self, dtype: torch.dtype) -> 'Dataset':
        return replace(self, inputs=self.inputs.to(dtype))

    def digest(self) -> str:
        digest = hashlib.sha256(f"classes={self.num_classes};layout={self.layout.image_shape}".encode("utf-8"))
        digest.update(self.inputs.detach().cpu().contiguous().numpy().tobytes())
        digest.update(self.labels.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class ToySpec:
    """Parameters of the seeded Gaussian-blob benchmark"""
    num_classes: int = 4
    per_class: int = 100
    channels: int = 2
    height: int = 8
    width: int = 8
    separation: float = 3.0
    noise: float = 1.0
    seed: int = 7
    test_per_class: int = 100

    def __post_init__(self):
        if self.num_classes < 2:
            raise ToySpecError(f"Need at least 2 classes, got {self.num_classes}")
        if self.separation <= 0 or self.noise <= 0:
            raise ToySpecError(f"Separation and noise must be positive ({self.separation}, {self.noise})")
        if self.per_class < 1 or self.test_per_class < 1:
            raise ToySpecError("Sample counts must be positive")
        if min(self.channels, self.height, self.width) < 1:
            raise ToySpecError(f"Invalid image shape {self.layout.image_shape}")
        if self.num_classes > self.layout.input_dim:
            raise ToySpecError(f"{self.num_classes} classes exceed input dimension {self.layout.input_dim}")

    @property
    def layout(self) -> ChannelLayout:
        return ChannelLayout(self.channels, self.height, self.width)


def toy_prototypes(spec: ToySpec) -> np.ndarray:
    """Class centres: orthonormal directions scaled so every pair sits `separation` apart"""
    rng = np.random.default_rng(spec.seed)
    basis, _ = np.linalg.qr(rng.standard_normal((spec.layout.input_dim, spec.num_classes)))
    return (spec.separation / np.sqrt(2.0)) * basis.T


def _draw(spec: ToySpec, prototypes: np.ndarray, per_class: int, stream: int) -> Dataset:
    rng = np.random.default_rng([spec.seed, stream])
    dim = spec.layout.input_dim
    inputs = np.concatenate([
        prototypes[c] + spec.noise * rng.standard_normal((per_class, dim))
        for c in range(spec.num_classes)
    ])
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    return Dataset(
        inputs=torch.from_numpy(inputs),
        labels=torch.from_numpy(labels).long(),
        num_classes=spec.num_classes,
        layout=spec.layout,
    )


def make_toy_dataset(spec: ToySpec) -> Dataset:
    """Training split: class-major rows, float64, deterministic per seed"""
    return _draw(spec, toy_prototypes(spec), spec.per_class, stream=1)


def make_toy_split(spec: ToySpec) -> Tuple[Dataset, Dataset]:
    """Train and test sets around the same prototypes with independent noise"""
    prototypes = toy_prototypes(spec)
    train = _draw(spec, prototypes, spec.per_class, stream=1)
    test = _draw(spec, prototypes, spec.test_per_class, stream=2)
    logger.info(f"Toy data: {spec.num_classes} classes, {len(train)} train / {len(test)} test rows")
    return train, test


def _channel_view(dataset: Dataset) -> torch.Tensor:
    return dataset.inputs.reshape(len(dataset), dataset.layout.channels, -1)


def normalize(dataset: Dataset, mean: Optional[Sequence[float]] = None,
              std: Optional[Sequence[float]] = None) -> Dataset:
    """Per-channel (x - mean) / std; statistics computed from the data unless given"""
    if dataset.normalized:
        raise NormalizationError("Dataset is already normalized", channel=-1)

    x = _channel_view(dataset)
    if mean is None or std is None:
        mean_t = x.mean(dim=(0, 2))
        std_t = x.std(dim=(0, 2), correction=0)
    else:
        mean_t = torch.tensor(list(mean), dtype=x.dtype)
        std_t = torch.tensor(list(std), dtype=x.dtype)
    if mean_t.numel() != dataset.layout.channels or std_t.numel() != dataset.layout.channels:
        raise NormalizationError(f"Expected {dataset.layout.channels} channel statistics", channel=-1)

    for channel, value in enumerate(std_t.tolist()):
        if not value > 0:
            raise NormalizationError(f"Channel {channel} has non-positive std {value}", channel=channel)

    normalized = (x - mean_t[None, :, None]) / std_t[None, :, None]
    return replace(
        dataset,
        inputs=normalized.reshape(len(dataset), -1),
        norm_mean=tuple(float(m) for m in mean_t.tolist()),
        norm_std=tuple(float(s) for s in std_t.tolist()),
    )


def denormalize_rows(inputs: torch.Tensor, layout: ChannelLayout,
                     mean: Optional[Sequence[float]], std: Optional[Sequence[float]]) -> torch.Tensor:
    if mean is None or std is None:
        return inputs
    x = inputs.reshape(inputs.shape[0], layout.channels, -1)
    mean_t = torch.tensor(list(mean), dtype=x.dtype)
    std_t = torch.tensor(list(std), dtype=x.dtype)
    return (x * std_t[None, :, None] + mean_t[None, :, None]).reshape(inputs.shape[0], -1)


def denormalize(dataset: Dataset) -> Dataset:
    """Undo normalize using the recorded statistics"""
    if not dataset.normalized:
        return dataset
    restored = denormalize_rows(dataset.inputs, dataset.layout, dataset.norm_mean, dataset.norm_std)
    return replace(dataset, inputs=restored, norm_mean=None, norm_std=None)
