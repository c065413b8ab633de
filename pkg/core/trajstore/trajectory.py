#!/usr/bin/env python3
"""
Expert Trajectories
Per-epoch parameter snapshots of surrogate networks trained on real data
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import torch

from core.datakit.dataset import Dataset
from core.diffnet import DTYPE_TAGS, NetworkSpec, ParamVector
from core.errors import ExpertTrainingError, ShapeError, TrajectoryRangeError
from core.synthetic import bitwise_equal
from core.trainer import init_params, train_network

logger = logging.getLogger(__name__)


@dataclass
class TrajectoryMeta:
    """Provenance of one expert run"""
    seed: int
    spec_digest: str
    dataset_digest: str
    epochs: int
    dtype_tag: int
    training: Dict[str, Any] = field(default_factory=dict)

    @property
    def spec(self) -> NetworkSpec:
        return NetworkSpec.from_dict(self.training["spec"])


@dataclass
class Trajectory:
    """snapshots[t] holds the parameters after epoch t; snapshots[0] is the initialization"""
    snapshots: List[ParamVector]
    meta: TrajectoryMeta

    def __post_init__(self):
        if len(self.snapshots) != self.meta.epochs + 1:
            raise ShapeError(f"Expected {self.meta.epochs + 1} snapshots, got {len(self.snapshots)}")
        sizes = {tuple(s.shape) for s in self.snapshots}
        if len(sizes) != 1 or len(next(iter(sizes))) != 1:
            raise ShapeError(f"Snapshots must be vectors of one length, got shapes {sorted(sizes)}")

    @property
    def epochs(self) -> int:
        return self.meta.epochs

    @property
    def param_count(self) -> int:
        return self.snapshots[0].numel()

    @property
    def dtype(self) -> torch.dtype:
        return self.snapshots[0].dtype

    def astype(self, dtype: torch.dtype) -> 'Trajectory':
        if dtype == self.dtype:
            return self
        meta = TrajectoryMeta(**{**self.meta.__dict__, "dtype_tag": DTYPE_TAGS[dtype]})
        return Trajectory([s.to(dtype) for s in self.snapshots], meta)

    def bitwise_equal(self, other: 'Trajectory') -> bool:
        return (
            self.meta == other.meta
            and len(self.snapshots) == len(other.snapshots)
            and all(bitwise_equal(a, b) for a, b in zip(self.snapshots, other.snapshots))
        )


def train_expert(spec: NetworkSpec, dataset: Dataset, epochs: int, seed: int, lr: float,
                 momentum: float = 0.9, batch_size: int = 64) -> Trajectory:
    """Train one expert from a seeded initialization, snapshotting every epoch"""
    if len(dataset) == 0:
        raise ExpertTrainingError("Cannot train an expert on an empty dataset")
    if epochs < 1:
        raise ExpertTrainingError(f"Expert needs at least one epoch, got {epochs}")
    if batch_size < 1 or lr <= 0:
        raise ExpertTrainingError(f"Invalid expert hyper-parameters: lr={lr}, batch_size={batch_size}")

    dtype = dataset.inputs.dtype
    start = init_params(spec, seed, dtype)
    snapshots = [start.clone()]
    result = train_network(
        spec, dataset.inputs, dataset.labels,
        epochs=epochs, lr=lr, momentum=momentum, batch_size=batch_size, seed=seed,
        init=start,
        on_epoch=lambda epoch, params, loss, acc: snapshots.append(params),
    )

    meta = TrajectoryMeta(
        seed=seed,
        spec_digest=spec.digest(),
        dataset_digest=dataset.digest(),
        epochs=epochs,
        dtype_tag=DTYPE_TAGS[dtype],
        training={
            "spec": spec.describe(),
            "lr": lr,
            "momentum": momentum,
            "batch_size": batch_size,
            "loss": result.losses,
            "accuracy": result.accuracies,
        },
    )
    logger.info(f"Expert seed={seed} trained for {epochs} epochs: "
                f"loss={result.losses[-1]:.4f} acc={result.accuracies[-1]:.4f}")
    return Trajectory(snapshots, meta)


def get_pair(traj: Trajectory, t: int, M: int) -> Tuple[ParamVector, ParamVector]:
    """Copies of (snapshot t, snapshot t + M)"""
    if t < 0 or M < 0 or t + M > traj.epochs:
        raise TrajectoryRangeError(f"Pair ({t}, {t + M}) lies outside epochs 0..{traj.epochs}")
    return traj.snapshots[t].clone(), traj.snapshots[t + M].clone()


def distance_profile(traj: Trajectory, M: int) -> List[float]:
    """||theta_t - theta_{t+M}|| for t = 0 .. n - M"""
    if M < 0 or M > traj.epochs:
        raise TrajectoryRangeError(f"Gap M={M} does not fit {traj.epochs} epochs")
    return [
        float(torch.linalg.vector_norm((traj.snapshots[t] - traj.snapshots[t + M]).to(torch.float64)))
        for t in range(traj.epochs - M + 1)
    ]
