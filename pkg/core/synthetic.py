#!/usr/bin/env python3
"""
Synthetic Dataset
Trainable distilled images, their labels and the inner learning rate
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F

from core.datakit.dataset import ChannelLayout
from core.diffnet import LabelMode, SOFT_LABEL_TOLERANCE
from core.errors import ShapeError


def _leaf(tensor: torch.Tensor) -> torch.Tensor:
    return tensor.detach().clone().requires_grad_(True)


def bitwise_equal(a: Optional[torch.Tensor], b: Optional[torch.Tensor]) -> bool:
    """Equal dtype, shape and bytes (distinguishes -0.0 from 0.0)"""
    if a is None or b is None:
        return a is None and b is None
    if a.dtype != b.dtype or a.shape != b.shape:
        return False
    return a.detach().cpu().contiguous().numpy().tobytes() == b.detach().cpu().contiguous().numpy().tobytes()


@dataclass
class SyntheticDataset:
    """Rows are class-major: row i belongs to class i // ipc.

    Hard mode keeps fixed class indices and no logits; soft mode keeps
    trainable logit rows whose softmax is the training target. Images,
    logits and alpha are leaf tensors the outer optimizers update in place.
    """
    images: torch.Tensor
    label_mode: LabelMode
    num_classes: int
    ipc: int
    alpha: torch.Tensor
    hard_labels: Optional[torch.Tensor] = None
    label_logits: Optional[torch.Tensor] = None
    layout: Optional[ChannelLayout] = None
    norm_mean: Optional[Tuple[float, ...]] = None
    norm_std: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        self.label_mode = LabelMode(self.label_mode)
        rows = self.num_classes * self.ipc
        if self.images.dim() != 2 or self.images.shape[0] != rows:
            raise ShapeError(f"Expected {rows} synthetic rows (classes * ipc), got shape {tuple(self.images.shape)}")
        if self.layout is not None and self.images.shape[1] != self.layout.input_dim:
            raise ShapeError(f"Image width {self.images.shape[1]} does not match layout {self.layout}")

        if self.label_mode is LabelMode.HARD:
            if self.hard_labels is None or self.label_logits is not None:
                raise ShapeError("Hard mode needs hard_labels and no label_logits")
            if self.hard_labels.shape != (rows,):
                raise ShapeError(f"Expected {rows} hard labels, got {tuple(self.hard_labels.shape)}")
            self.hard_labels = self.hard_labels.detach().long()
        else:
            if self.label_logits is None:
                raise ShapeError("Soft mode needs label_logits")
            if self.label_logits.shape != (rows, self.num_classes):
                raise ShapeError(f"Expected logits of shape ({rows}, {self.num_classes}), got {tuple(self.label_logits.shape)}")
            if not self.label_logits.is_leaf or not self.label_logits.requires_grad:
                self.label_logits = _leaf(self.label_logits)

        if not bool((self.alpha.detach() >= 0).all()):
            raise ShapeError("Inner learning rate alpha must be non-negative")
        if not self.images.is_leaf or not self.images.requires_grad:
            self.images = _leaf(self.images)
        if not self.alpha.is_leaf or not self.alpha.requires_grad:
            self.alpha = _leaf(self.alpha)

    @property
    def rows(self) -> int:
        return self.images.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.images.dtype

    def soft_labels(self) -> torch.Tensor:
        """softmax(label_logits) rows (soft mode only)"""
        if self.label_logits is None:
            raise ShapeError("Hard-mode synthetic data has no soft labels")
        return F.softmax(self.label_logits.detach(), dim=1)

    def soft_rows_valid(self) -> bool:
        if self.label_logits is None:
            return True
        if not bool(torch.isfinite(self.label_logits).all()):
            return False
        deviation = (self.soft_labels().sum(dim=1) - 1.0).abs().max().item()
        return deviation <= SOFT_LABEL_TOLERANCE

    def clone(self) -> 'SyntheticDataset':
        return SyntheticDataset(
            images=_leaf(self.images),
            label_mode=self.label_mode,
            num_classes=self.num_classes,
            ipc=self.ipc,
            alpha=_leaf(self.alpha),
            hard_labels=None if self.hard_labels is None else self.hard_labels.clone(),
            label_logits=None if self.label_logits is None else _leaf(self.label_logits),
            layout=self.layout,
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
        )

    def bitwise_equal(self, other: 'SyntheticDataset') -> bool:
        return (
            self.label_mode is other.label_mode
            and self.num_classes == other.num_classes
            and self.ipc == other.ipc
            and self.layout == other.layout
            and self.norm_mean == other.norm_mean
            and self.norm_std == other.norm_std
            and bitwise_equal(self.images, other.images)
            and bitwise_equal(self.alpha, other.alpha)
            and bitwise_equal(self.hard_labels, other.hard_labels)
            and bitwise_equal(self.label_logits, other.label_logits)
        )
