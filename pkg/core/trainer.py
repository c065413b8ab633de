#!/usr/bin/env python3
"""
Surrogate Network Trainer
Seeded mini-batch SGD on a flat parameter vector, shared by expert
generation and the evaluation harness
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import torch

from core.diffnet import LabelMode, NetworkSpec, ParamVector, apply_network, loss
from core.errors import DivergenceError

logger = logging.getLogger(__name__)

EpochCallback = Callable[[int, ParamVector, float, float], None]


@dataclass
class TrainResult:
    """Final parameters plus per-epoch training curves"""
    params: ParamVector
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)


def spawn_seeds(seed: int, count: int) -> List[int]:
    """count independent child seeds of seed, each below 2**63 so torch generators accept them"""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1, np.uint64)[0] >> np.uint64(1)) for child in children]


def init_params(spec: NetworkSpec, seed: int, dtype: torch.dtype = torch.float64) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per block, drawn in double then cast"""
    generator = torch.Generator().manual_seed(seed)
    chunks = []
    fan_in = 1
    for name, shape in spec.layer_shapes():
        if name.endswith("weight"):
            fan_in = math.prod(shape[1:])
        bound = 1.0 / math.sqrt(fan_in)
        draw = torch.rand(math.prod(shape), generator=generator, dtype=torch.float64)
        chunks.append((draw * 2.0 - 1.0) * bound)
    return torch.cat(chunks).to(dtype)


def accuracy(params: ParamVector, spec: NetworkSpec, inputs: torch.Tensor, labels: torch.Tensor) -> float:
    with torch.no_grad():
        predictions = apply_network(params.detach(), inputs, spec).argmax(dim=1)
    return int((predictions == labels).sum()) / labels.shape[0]


def dataset_loss(params: ParamVector, spec: NetworkSpec, inputs: torch.Tensor, labels: torch.Tensor) -> float:
    with torch.no_grad():
        return float(loss(apply_network(params.detach(), inputs, spec), labels, LabelMode.HARD))


def train_network(spec: NetworkSpec, inputs: torch.Tensor, labels: torch.Tensor,
                  epochs: int, lr: float, momentum: float, batch_size: int, seed: int,
                  init: Optional[ParamVector] = None,
                  on_epoch: Optional[EpochCallback] = None) -> TrainResult:
    """Hard-CE SGD with seeded per-epoch shuffling.

    After every epoch the full-set loss and accuracy are measured and passed
    to on_epoch together with a copy of the parameters.
    """
    start = init if init is not None else init_params(spec, seed, inputs.dtype)
    theta = start.detach().clone().to(inputs.dtype).requires_grad_(True)
    optimizer = torch.optim.SGD([theta], lr=lr, momentum=momentum)
    generator = torch.Generator().manual_seed(seed)
    result = TrainResult(params=theta.detach().clone())

    rows = inputs.shape[0]
    with torch.enable_grad():
        for epoch in range(1, epochs + 1):
            order = torch.randperm(rows, generator=generator)
            for rows_idx in torch.split(order, batch_size):
                optimizer.zero_grad(set_to_none=True)
                value = loss(apply_network(theta, inputs[rows_idx], spec), labels[rows_idx], LabelMode.HARD)
                value.backward()
                optimizer.step()

            if not bool(torch.isfinite(theta).all()):
                raise DivergenceError(f"Training diverged at epoch {epoch}", step=epoch)

            snapshot = theta.detach().clone()
            epoch_loss = dataset_loss(snapshot, spec, inputs, labels)
            epoch_acc = accuracy(snapshot, spec, inputs, labels)
            result.losses.append(epoch_loss)
            result.accuracies.append(epoch_acc)
            logger.debug(f"epoch {epoch}: loss={epoch_loss:.5f} acc={epoch_acc:.4f}")
            if on_epoch is not None:
                on_epoch(epoch, snapshot, epoch_loss, epoch_acc)

    result.params = theta.detach().clone()
    return result
