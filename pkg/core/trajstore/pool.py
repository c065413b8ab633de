#!/usr/bin/env python3
"""
Expert Pool
Loads every trajectory buffer in a directory and samples one per iteration
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from core.errors import DistillConfigError, ShapeError
from core.trajstore.buffer import BUFFER_SUFFIX, read_buffer
from core.trajstore.trajectory import Trajectory

logger = logging.getLogger(__name__)


def expert_filename(index: int) -> str:
    return f"expert_{index}{BUFFER_SUFFIX}"


class ExpertPool:
    """Read-only set of expert trajectories sharing one parameter length"""

    def __init__(self, trajectories: Sequence[Trajectory], dtype: Optional[torch.dtype] = None):
        if not trajectories:
            raise DistillConfigError("Expert pool is empty")
        self.trajectories: List[Trajectory] = [
            t.astype(dtype) if dtype is not None else t for t in trajectories
        ]
        lengths = {t.param_count for t in self.trajectories}
        if len(lengths) != 1:
            raise ShapeError(f"Experts disagree on parameter count: {sorted(lengths)}")

    @classmethod
    def from_directory(cls, directory: Union[str, Path], dtype: Optional[torch.dtype] = None,
                       count: Optional[int] = None) -> 'ExpertPool':
        """Every buffer in name order, or exactly expert_0 .. expert_{count-1} when count is given"""
        directory = Path(directory)
        if count is not None:
            if count < 1:
                raise DistillConfigError(f"Expert count must be >= 1, got {count}")
            paths = [directory / expert_filename(k) for k in range(count)]
            missing = [p.name for p in paths if not p.is_file()]
            if missing:
                raise DistillConfigError(f"Expected {count} experts in {directory}; missing {', '.join(missing)}")
        else:
            paths = sorted(directory.glob(f"*{BUFFER_SUFFIX}")) if directory.is_dir() else []
        if not paths:
            raise DistillConfigError(f"No expert buffers (*{BUFFER_SUFFIX}) found in {directory}")
        trajectories = [read_buffer(p) for p in paths]
        logger.info(f"Loaded {len(trajectories)} experts from {directory}")
        return cls(trajectories, dtype)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __getitem__(self, index: int) -> Trajectory:
        return self.trajectories[index]

    @property
    def param_count(self) -> int:
        return self.trajectories[0].param_count

    @property
    def min_epochs(self) -> int:
        return min(t.epochs for t in self.trajectories)

    def sample(self, rng: np.random.Generator) -> Tuple[int, Trajectory]:
        """Uniform choice among the experts"""
        index = int(rng.integers(0, len(self.trajectories)))
        return index, self.trajectories[index]
