#!/usr/bin/env python3
"""
Trajectory-Matching Distillation
Outer loop: sample an expert segment, unroll inner SGD on the synthetic set
from its start, and move images (and soft labels and alpha) along the
hypergradient of the normalized matching loss
"""

import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
import torch

from core.analytics.metrics_log import MetricsLog, MetricsRecord
from core.datakit.dataset import Dataset
from core.datakit.export import export_distilled
from core.diffnet import (
    DTYPES,
    HyperGradients,
    LabelMode,
    NetworkSpec,
    ParamVector,
    apply_network,
    hypergrad,
    unroll_inner,
)
from core.errors import (
    DegeneratePairError,
    DistillConfigError,
    DivergenceError,
    InitializationError,
    ShapeError,
)
from core.evalharness import default_labels
from core.synthetic import SyntheticDataset
from core.trajstore.pool import ExpertPool
from core.trajstore.schedule import MatchingRangeSchedule, sample_start
from core.trajstore.trajectory import Trajectory, get_pair

logger = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-8

Evaluator = Callable[[SyntheticDataset], float]

__all__ = [
    'SyntheticDataset', 'DistillConfig', 'OuterOptimizer',
    'init_synthetic', 'matching_loss', 'matching_hypergradients', 'distill_step',
    'prepare_synthetic', 'run_distillation', 'save_checkpoint',
]


@dataclass
class DistillConfig:
    """Outer and inner loop hyper-parameters"""
    N: int = 40
    M: int = 2
    schedule: MatchingRangeSchedule = field(default_factory=lambda: MatchingRangeSchedule(0, 15, 20, 100))
    iterations: int = 10000
    syn_batch: int = 0  # <= 0 or >= rows: full synthetic set every step
    ipc: int = 3
    lr_img: float = 10.0
    lr_label: float = 5.0
    lr_alpha: float = 1e-4
    momentum_img: float = 0.5
    label_mode: LabelMode = LabelMode.HARD
    per_step_alpha: bool = False
    seed: int = 0
    precision: str = "single"
    expert_dir: str = ""
    checkpoint_every: int = 500
    log_every: int = 100
    eval_every: int = 0

    def __post_init__(self):
        self.label_mode = LabelMode(self.label_mode)
        if self.N < 1 or self.M < 1 or self.iterations < 1 or self.ipc < 1:
            raise DistillConfigError(
                f"N, M, iterations and ipc must be >= 1 (N={self.N}, M={self.M}, "
                f"iterations={self.iterations}, ipc={self.ipc})"
            )
        if min(self.lr_img, self.lr_label, self.lr_alpha, self.momentum_img) < 0:
            raise DistillConfigError("Outer learning rates and momentum must be >= 0")
        if self.precision not in DTYPES:
            raise DistillConfigError(f"Unknown precision {self.precision!r}")

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.precision]


class OuterOptimizer:
    """SGD with momentum for images, plain SGD for label logits and alpha"""

    def __init__(self, syn: SyntheticDataset, config: DistillConfig):
        self.syn = syn
        self.images = torch.optim.SGD([syn.images], lr=config.lr_img, momentum=config.momentum_img)
        self.labels = None
        if syn.label_mode is LabelMode.SOFT:
            self.labels = torch.optim.SGD([syn.label_logits], lr=config.lr_label)
        self.alpha = torch.optim.SGD([syn.alpha], lr=config.lr_alpha)
        self.lr_img = config.lr_img
        self.lr_label = config.lr_label
        self.lr_alpha = config.lr_alpha

    def step(self, grads: HyperGradients):
        syn = self.syn
        if self.lr_img > 0:
            syn.images.grad = grads.images.to(syn.images.dtype)
            self.images.step()
        if self.labels is not None and self.lr_label > 0:
            syn.label_logits.grad = grads.label_logits.to(syn.label_logits.dtype)
            self.labels.step()
        if self.lr_alpha > 0:
            syn.alpha.grad = grads.alpha.to(syn.alpha.dtype)
            self.alpha.step()
            with torch.no_grad():
                syn.alpha.clamp_(min=ALPHA_FLOOR)

        for opt in (self.images, self.labels, self.alpha):
            if opt is not None:
                opt.zero_grad(set_to_none=True)


def _alpha_tensor(alpha: float, dtype: torch.dtype, steps: Optional[int]) -> torch.Tensor:
    if alpha <= 0:
        raise DistillConfigError(f"Initial alpha must be positive, got {alpha}")
    if steps is None:
        return torch.tensor(alpha, dtype=dtype)
    return torch.full((steps,), alpha, dtype=dtype)


def init_synthetic(real: Dataset, ipc: int, mode, pretrained: Optional[ParamVector] = None,
                   spec: Optional[NetworkSpec] = None, seed: int = 0, alpha: float = 0.01,
                   steps: Optional[int] = None) -> SyntheticDataset:
    """Seed the synthetic set with ipc real samples per class, class-major.

    Soft mode draws only samples the pretrained model classifies correctly and
    uses that model's logits as the initial label logits.
    """
    mode = LabelMode(mode)
    if ipc < 1:
        raise DistillConfigError(f"ipc must be >= 1, got {ipc}")
    rng = np.random.default_rng(seed)
    dtype = real.inputs.dtype

    logits = None
    correct = None
    if mode is LabelMode.SOFT:
        if pretrained is None or spec is None:
            raise DistillConfigError("Soft-label initialization needs a pretrained snapshot and its network spec")
        with torch.no_grad():
            logits = apply_network(pretrained.detach().to(dtype), real.inputs, spec)
        correct = (logits.argmax(dim=1) == real.labels).cpu().numpy()

    chosen = []
    for c in range(real.num_classes):
        pool = real.class_indices(c)
        if correct is not None:
            pool = pool[correct[pool]]
        if len(pool) < ipc:
            qualifier = "correctly classified " if correct is not None else ""
            raise InitializationError(f"Class {c} has {len(pool)} {qualifier}samples, fewer than ipc={ipc}",
                                      class_index=c)
        chosen.append(rng.choice(pool, size=ipc, replace=False))
    rows = torch.from_numpy(np.concatenate(chosen)).long()

    syn = SyntheticDataset(
        images=real.inputs[rows].clone(),
        label_mode=mode,
        num_classes=real.num_classes,
        ipc=ipc,
        alpha=_alpha_tensor(alpha, dtype, steps),
        hard_labels=torch.tensor(default_labels(real.num_classes, ipc)) if mode is LabelMode.HARD else None,
        label_logits=logits[rows].clone() if logits is not None else None,
        layout=real.layout,
        norm_mean=real.norm_mean,
        norm_std=real.norm_std,
    )
    logger.info(f"Synthetic set initialized: {syn.rows} rows, {mode.value} labels")
    return syn


def _sq_norm(vector: torch.Tensor) -> torch.Tensor:
    return torch.dot(vector, vector)


def matching_loss(theta_end: ParamVector, theta_target: ParamVector, theta_expert_start: ParamVector) -> float:
    """||theta_end - target||^2 / ||expert_start - target||^2"""
    if not theta_end.shape == theta_target.shape == theta_expert_start.shape:
        raise ShapeError("Matching loss needs three parameter vectors of equal length")
    denominator = _sq_norm(theta_expert_start.detach() - theta_target.detach())
    if float(denominator) == 0.0:
        raise DegeneratePairError("Expert start and target parameters coincide")
    return float(_sq_norm(theta_end.detach() - theta_target.detach()) / denominator)


def matching_hypergradients(syn: SyntheticDataset, start: ParamVector, target: ParamVector,
                            spec: NetworkSpec, N: int, batch_size: int = 0,
                            batch_seed: int = 0) -> Tuple[float, ParamVector, HyperGradients]:
    """Matching loss of an N-step unroll from start, and its hypergradients"""
    start = start.to(syn.dtype)
    target = target.to(syn.dtype)
    denominator = _sq_norm(start - target)
    if float(denominator) == 0.0:
        raise DegeneratePairError("Expert start and target parameters coincide")

    theta_end, tape = unroll_inner(start, syn, N, spec, batch_size=batch_size, seed=batch_seed)
    difference = theta_end - target
    loss = float(_sq_norm(difference) / denominator)
    d_outer = 2.0 * difference / denominator
    return loss, theta_end, hypergrad(tape, d_outer, syn, spec)


def _alpha_value(syn: SyntheticDataset) -> float:
    return float(syn.alpha.detach().mean())


def _norm(tensor: torch.Tensor) -> float:
    return float(torch.linalg.vector_norm(tensor.detach().to(torch.float64))) if tensor.numel() else 0.0


def distill_step(syn: SyntheticDataset, traj: Trajectory, config: DistillConfig, iteration: int,
                 rng: np.random.Generator, spec: NetworkSpec, optimizer: Optional[OuterOptimizer] = None,
                 expert_index: int = 0) -> Tuple[SyntheticDataset, MetricsRecord]:
    """One outer iteration; updates syn in place and returns it with its metrics record"""
    schedule = config.schedule
    bound = schedule.current_bound(iteration)
    t = sample_start(schedule, iteration, rng)
    batch_seed = int(rng.integers(0, 2 ** 62))
    start, target = get_pair(traj, t, config.M)

    try:
        loss, _, grads = matching_hypergradients(syn, start, target, spec, config.N, config.syn_batch, batch_seed)
    except DegeneratePairError:
        logger.warning(f"Iteration {iteration}: expert {expert_index} is stalled between epochs {t} "
                       f"and {t + config.M}; skipping")
        return syn, MetricsRecord(iteration=iteration, matching_loss=0.0, t=t, T=bound,
                                  alpha=_alpha_value(syn), expert=expert_index, skipped=True)

    if optimizer is None:
        optimizer = OuterOptimizer(syn, config)
    optimizer.step(grads)

    if not bool(torch.isfinite(syn.images).all()) or not syn.soft_rows_valid():
        raise DivergenceError(f"Synthetic data became non-finite at iteration {iteration}", step=iteration)

    record = MetricsRecord(
        iteration=iteration,
        matching_loss=loss,
        t=t,
        T=bound,
        alpha=_alpha_value(syn),
        grad_norm_images=_norm(grads.images),
        grad_norm_labels=_norm(grads.label_logits),
        grad_norm_alpha=_norm(grads.alpha),
        expert=expert_index,
    )
    logger.debug(f"it {iteration}: loss={loss:.5f} t={t} T={bound} alpha={record.alpha:.3e}")
    return syn, record


def prepare_synthetic(config: DistillConfig, real: Dataset, spec: NetworkSpec, pool: ExpertPool) -> SyntheticDataset:
    """Initial synthetic set; alpha starts at the first expert's learning rate"""
    lead = pool[0]
    alpha = float(lead.meta.training.get("lr", 0.01))
    pretrained = None
    if config.label_mode is LabelMode.SOFT:
        pretrained = lead.snapshots[min(config.schedule.t_plus, lead.epochs)].to(config.dtype)
    return init_synthetic(
        real.astype(config.dtype), config.ipc, config.label_mode,
        pretrained=pretrained, spec=spec, seed=config.seed, alpha=alpha,
        steps=config.N if config.per_step_alpha else None,
    )


def save_checkpoint(directory: Union[str, Path], iteration: int, syn: SyntheticDataset, log: MetricsLog) -> Path:
    """Export plus metrics CSV, written to a temporary directory and renamed into ckpt_<iteration>"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    final = directory / f"ckpt_{iteration}"
    tmp = directory / f".ckpt_{iteration}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)

    export_distilled(tmp, syn)
    log.to_csv(tmp / "metrics.csv")
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    logger.info(f"Checkpoint written: {final}")
    return final


def run_distillation(config: DistillConfig, real: Dataset, spec: NetworkSpec,
                     pool: Optional[ExpertPool] = None, checkpoint_dir: Optional[Union[str, Path]] = None,
                     evaluator: Optional[Evaluator] = None,
                     syn: Optional[SyntheticDataset] = None) -> Tuple[SyntheticDataset, MetricsLog]:
    """Run config.iterations distill steps, one uniformly sampled expert per iteration"""
    if pool is None:
        if not config.expert_dir:
            raise DistillConfigError("No expert pool given and no expert_dir configured")
        pool = ExpertPool.from_directory(config.expert_dir, config.dtype)
    if len(pool) == 0:
        raise DistillConfigError("Expert pool is empty")
    if pool.param_count != spec.param_count:
        raise DistillConfigError(f"Experts have {pool.param_count} parameters, network spec needs {spec.param_count}")
    config.schedule.validate_for(pool.min_epochs, config.M)

    if syn is None:
        syn = prepare_synthetic(config, real, spec, pool)
    optimizer = OuterOptimizer(syn, config)
    rng = np.random.default_rng(config.seed)
    log = MetricsLog()

    logger.info(f"Distilling {config.iterations} iterations: N={config.N} M={config.M} "
                f"range={config.schedule.describe()} labels={config.label_mode.value} experts={len(pool)}")
    for iteration in range(config.iterations):
        expert_index, traj = pool.sample(rng)
        syn, record = distill_step(syn, traj, config, iteration, rng, spec, optimizer, expert_index)

        done = iteration + 1
        if evaluator is not None and config.eval_every > 0 and done % config.eval_every == 0:
            record.eval_accuracy = float(evaluator(syn))
            logger.info(f"it {done}: eval accuracy={record.eval_accuracy:.4f}")
        log.append(record)

        if config.log_every > 0 and done % config.log_every == 0:
            logger.info(f"it {done}/{config.iterations}: loss={record.matching_loss:.5f} "
                        f"T={record.T} alpha={record.alpha:.3e}")
        periodic = config.checkpoint_every > 0 and done % config.checkpoint_every == 0
        if checkpoint_dir is not None and (periodic or done == config.iterations):
            save_checkpoint(checkpoint_dir, done, syn, log)

    if log.skipped:
        logger.warning(f"{log.skipped} of {config.iterations} iterations skipped on stalled expert pairs")
    return syn, log
