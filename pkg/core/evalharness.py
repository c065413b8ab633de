#!/usr/bin/env python3
"""
Evaluation Harness
Retrains fresh surrogate networks on distilled images with labels regenerated
in default order, reports test accuracy and audits stored labels
"""

import csv
import hashlib
import json
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch

from core.datakit.dataset import Dataset
from core.datakit.export import LABELS_FILE, SOFT_LABELS_FILE, import_distilled
from core.diffnet import LabelMode, NetworkSpec
from core.errors import (
    ArtifactMissingError,
    EvalConfigError,
    EvalShapeError,
    InitializationError,
    LabelAuditError,
)
from core.parallel import fan_out
from core.synthetic import SyntheticDataset
from core.trainer import accuracy, train_network

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    """How every fresh evaluation network is trained"""
    spec: NetworkSpec
    epochs: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    seeds: int = 5
    base_seed: int = 0
    workers: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise EvalConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.seeds < 1:
            raise EvalConfigError(f"seeds must be >= 1, got {self.seeds}")
        if self.lr < 0 or self.momentum < 0 or self.batch_size < 1:
            raise EvalConfigError(f"Invalid training hyper-parameters: lr={self.lr}, "
                                  f"momentum={self.momentum}, batch_size={self.batch_size}")

    def seed_list(self) -> List[int]:
        return [self.base_seed + k for k in range(self.seeds)]

    def digest(self) -> str:
        description = {
            "spec": self.spec.describe(),
            "epochs": self.epochs,
            "lr": self.lr,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
        }
        return hashlib.sha256(json.dumps(description, sort_keys=True).encode("utf-8")).hexdigest()[:16]


@dataclass
class EvalReport:
    """Per-seed test accuracies in seed order"""
    seeds: List[int]
    accuracies: List[float]
    config_digest: str = ""

    def __post_init__(self):
        if len(self.seeds) != len(self.accuracies) or not self.accuracies:
            raise EvalShapeError("Report needs one accuracy per seed")
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise EvalShapeError(f"Accuracies must lie in [0, 1]: {self.accuracies}")

    @property
    def mean(self) -> float:
        return sum(self.accuracies) / len(self.accuracies)

    @property
    def std(self) -> float:
        return statistics.pstdev(self.accuracies)

    def summary(self) -> str:
        return f"mean={self.mean!r} std={self.std!r} config={self.config_digest}"

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, 'w', newline='', encoding='utf-8') as csvfile:
            writer = csv.writer(csvfile)
            writer.writerow(['seed', 'accuracy'])
            for seed, acc in zip(self.seeds, self.accuracies):
                writer.writerow([seed, repr(acc)])
            csvfile.write(f"# {self.summary()}\n")
        logger.info(f"Eval report written: {path} (mean={self.mean:.4f} std={self.std:.4f})")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> 'EvalReport':
        seeds, accuracies, digest = [], [], ""
        with open(path, 'r', newline='', encoding='utf-8') as csvfile:
            for row in csv.reader(csvfile):
                if not row or row[0] == 'seed':
                    continue
                if row[0].startswith('#'):
                    digest = row[0].rsplit("config=", 1)[-1].strip()
                    continue
                seeds.append(int(row[0]))
                accuracies.append(float(row[1]))
        return cls(seeds, accuracies, digest)


class LabelMismatch(NamedTuple):
    index: int
    stored: int
    expected: int


def default_labels(num_classes: int, ipc: int) -> List[int]:
    """Label of row i is i // ipc, the order the official evaluation regenerates"""
    return [i // ipc for i in range(num_classes * ipc)]


def _check_images(images: torch.Tensor, test: Dataset, config: EvalConfig, ipc: Optional[int]) -> int:
    classes = config.spec.num_classes
    if images.dim() != 2:
        raise EvalShapeError(f"Distilled images must be a matrix, got shape {tuple(images.shape)}")
    if images.shape[1] != test.inputs.shape[1] or images.shape[1] != config.spec.input_dim:
        raise EvalShapeError(f"Distilled rows have width {images.shape[1]}, test rows "
                             f"{test.inputs.shape[1]}, network expects {config.spec.input_dim}")
    if test.num_classes != classes:
        raise EvalShapeError(f"Test set has {test.num_classes} classes, network predicts {classes}")
    if ipc is None:
        ipc = images.shape[0] // classes
    if ipc < 1 or images.shape[0] != classes * ipc:
        raise EvalShapeError(f"{images.shape[0]} distilled rows are not {classes} classes x {ipc} ipc")
    return ipc


def _train_and_score(images: torch.Tensor, labels: torch.Tensor, test: Dataset,
                     config: EvalConfig, seed: int) -> float:
    result = train_network(
        config.spec, images, labels,
        epochs=config.epochs, lr=config.lr, momentum=config.momentum,
        batch_size=config.batch_size, seed=seed,
    )
    score = accuracy(result.params, config.spec, test.inputs.to(images.dtype), test.labels)
    logger.debug(f"eval seed={seed}: accuracy={score:.4f}")
    return score


def evaluate(images: Union[torch.Tensor, SyntheticDataset], test: Dataset, config: EvalConfig,
             ipc: Optional[int] = None, seeds: Optional[Sequence[int]] = None) -> EvalReport:
    """Train one fresh network per seed on (images, default labels) and score it on test.

    Stored labels of a SyntheticDataset are never read.
    """
    if isinstance(images, SyntheticDataset):
        ipc = images.ipc if ipc is None else ipc
        images = images.images
    images = images.detach()
    ipc = _check_images(images, test, config, ipc)

    labels = torch.tensor(default_labels(config.spec.num_classes, ipc), dtype=torch.long)
    seed_list = list(seeds) if seeds is not None else config.seed_list()
    accuracies = fan_out(lambda seed: _train_and_score(images, labels, test, config, seed),
                         seed_list, config.workers)
    return EvalReport(seed_list, accuracies, config.digest())


def stratified_subset(train: Dataset, ipc: int, seed: int) -> torch.Tensor:
    """Class-major row indices, ipc per class, sorted within each class"""
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(train.num_classes):
        pool = train.class_indices(c)
        if len(pool) < ipc:
            raise InitializationError(f"Class {c} has {len(pool)} samples, fewer than ipc={ipc}", class_index=c)
        chosen.append(np.sort(rng.choice(pool, size=ipc, replace=False)))
    return torch.from_numpy(np.concatenate(chosen)).long()


def baseline_random_subset(train: Dataset, test: Dataset, ipc: int, config: EvalConfig,
                           seeds: Optional[Sequence[int]] = None) -> EvalReport:
    """Control condition: a random class-stratified real subset evaluated like distilled data"""
    if ipc < 1:
        raise EvalConfigError(f"ipc must be >= 1, got {ipc}")
    seed_list = list(seeds) if seeds is not None else config.seed_list()
    if not seed_list:
        raise EvalConfigError("Baseline needs at least one seed")
    subsets = {seed: stratified_subset(train, ipc, seed) for seed in seed_list}
    labels = torch.tensor(default_labels(config.spec.num_classes, ipc), dtype=torch.long)
    dtype = train.inputs.dtype
    _check_images(train.inputs[subsets[seed_list[0]]], test, config, ipc)

    accuracies = fan_out(
        lambda seed: _train_and_score(train.inputs[subsets[seed]].to(dtype), labels, test, config, seed),
        seed_list, config.workers,
    )
    return EvalReport(seed_list, accuracies, config.digest())


def _load_for_audit(path: Union[str, Path]) -> SyntheticDataset:
    root = Path(path)
    if not (root / LABELS_FILE).exists() and not (root / SOFT_LABELS_FILE).exists():
        raise LabelAuditError(f"Artifact {root} has neither {LABELS_FILE} nor {SOFT_LABELS_FILE}")
    try:
        return import_distilled(root)
    except ArtifactMissingError as e:
        raise LabelAuditError(f"Cannot audit {root}: {e}") from e


def stored_labels(syn: SyntheticDataset) -> List[int]:
    """Hard labels as stored, or the argmax of each soft-label row"""
    if syn.label_mode is LabelMode.HARD and syn.hard_labels is not None:
        return syn.hard_labels.tolist()
    if syn.label_mode is LabelMode.SOFT and syn.label_logits is not None:
        return syn.label_logits.detach().argmax(dim=1).tolist()
    raise LabelAuditError("Synthetic dataset carries no label information")


def label_consistency_check(artifact: Union[str, Path, SyntheticDataset]) -> List[LabelMismatch]:
    """Every row whose stored label (or soft argmax) differs from the default-order label"""
    syn = artifact if isinstance(artifact, SyntheticDataset) else _load_for_audit(artifact)
    stored = stored_labels(syn)
    expected = default_labels(syn.num_classes, syn.ipc)
    if len(stored) != len(expected):
        raise LabelAuditError(f"{len(stored)} stored labels vs {len(expected)} default labels")

    mismatches = [LabelMismatch(i, s, e) for i, (s, e) in enumerate(zip(stored, expected)) if s != e]
    if mismatches:
        logger.warning(f"Label audit: {len(mismatches)} of {len(expected)} rows disagree with default order")
    return mismatches


def audit_report_lines(mismatches: Sequence[LabelMismatch]) -> List[str]:
    if not mismatches:
        return ["label audit: OK (all stored labels match default order)"]
    lines = [f"label audit: {len(mismatches)} mismatches (index, stored, expected)"]
    lines.extend(f"{m.index}\t{m.stored}\t{m.expected}" for m in mismatches)
    return lines
