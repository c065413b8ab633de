#!/usr/bin/env python3
"""
Differentiable Surrogate Network Core
Functional forward pass over a flat parameter vector, cross-entropy losses,
first-order gradients and exact hypergradients through unrolled inner SGD
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F

from core.errors import (
    DivergenceError,
    LabelValidationError,
    NumericError,
    ShapeError,
    UnrollError,
)

logger = logging.getLogger(__name__)

# Flat 1-D tensor holding every surrogate parameter; its dtype is the precision tag.
ParamVector = torch.Tensor

SOFT_LABEL_TOLERANCE = 1e-6

DTYPES = {"single": torch.float32, "double": torch.float64}
DTYPE_TAGS = {torch.float32: 4, torch.float64: 8}

ACTIVATIONS = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "softplus": F.softplus,
}


class LabelMode(Enum):
    HARD = "hard"
    SOFT = "soft"


@dataclass(frozen=True)
class NetworkSpec:
    """Surrogate architecture; the parameter count P follows from it"""
    input_dim: int
    num_classes: int
    hidden: Tuple[int, ...] = (64,)
    activation: str = "relu"
    kind: str = "mlp"  # mlp or conv
    image_shape: Optional[Tuple[int, int, int]] = None  # (channels, height, width), conv only
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))

        if self.input_dim < 1 or self.num_classes < 1:
            raise ShapeError(f"Invalid network dimensions: input={self.input_dim}, classes={self.num_classes}")
        if any(w < 1 for w in self.hidden):
            raise ShapeError(f"Hidden widths must be positive: {self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"Unknown activation: {self.activation}")
        if self.kind not in ("mlp", "conv"):
            raise ShapeError(f"Unknown network kind: {self.kind}")
        if self.kind == "conv":
            if self.image_shape is None or len(self.image_shape) != 3:
                raise ShapeError("Conv networks need image_shape=(channels, height, width)")
            if math.prod(self.image_shape) != self.input_dim:
                raise ShapeError(f"image_shape {self.image_shape} does not match input_dim {self.input_dim}")

    def layer_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Named parameter blocks in flat-vector order"""
        shapes: List[Tuple[str, Tuple[int, ...]]] = []

        if self.kind == "mlp":
            fan_in = self.input_dim
            for i, width in enumerate(self.hidden):
                shapes.append((f"fc{i}.weight", (width, fan_in)))
                if self.bias:
                    shapes.append((f"fc{i}.bias", (width,)))
                fan_in = width
        else:
            channels, height, width = self.image_shape
            for i, out_channels in enumerate(self.hidden):
                shapes.append((f"conv{i}.weight", (out_channels, channels, 3, 3)))
                if self.bias:
                    shapes.append((f"conv{i}.bias", (out_channels,)))
                channels = out_channels
                if height >= 2 and width >= 2:
                    height, width = height // 2, width // 2
            fan_in = channels * height * width

        shapes.append(("head.weight", (self.num_classes, fan_in)))
        if self.bias:
            shapes.append(("head.bias", (self.num_classes,)))
        return shapes

    @property
    def param_count(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layer_shapes())

    def describe(self) -> Dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "kind": self.kind,
            "image_shape": list(self.image_shape) if self.image_shape else None,
            "bias": self.bias,
        }

    def digest(self) -> str:
        canonical = json.dumps(self.describe(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NetworkSpec':
        return cls(
            input_dim=data["input_dim"],
            num_classes=data["num_classes"],
            hidden=tuple(data.get("hidden", ())),
            activation=data.get("activation", "relu"),
            kind=data.get("kind", "mlp"),
            image_shape=tuple(data["image_shape"]) if data.get("image_shape") else None,
            bias=data.get("bias", True),
        )


@dataclass
class Batch:
    """Inputs with hard class indices or soft distribution rows"""
    inputs: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.inputs.dim() != 2:
            raise ShapeError(f"Batch inputs must be a matrix, got shape {tuple(self.inputs.shape)}")
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ShapeError(f"Row mismatch: {self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels")
        if self.mode is LabelMode.SOFT:
            _check_soft_rows(self.labels)

    @property
    def mode(self) -> LabelMode:
        return LabelMode.SOFT if self.labels.is_floating_point() else LabelMode.HARD


@dataclass
class UnrollTape:
    """Replayable record of the inner SGD steps"""
    theta_start: ParamVector
    states: List[ParamVector]  # parameters before each step
    batches: List[Optional[torch.Tensor]]  # row indices per step, None = full set
    alphas: List[torch.Tensor]  # step size used per step
    label_mode: LabelMode
    num_rows: int
    syn_digest: str
    seed: int

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class HyperGradients:
    """Outer-loss gradients w.r.t. everything that shaped the unroll"""
    images: torch.Tensor
    label_logits: torch.Tensor  # zero-sized in hard mode
    alpha: torch.Tensor
    theta_start: ParamVector = field(default=None)


def _check_soft_rows(targets: torch.Tensor):
    if targets.dim() != 2:
        raise LabelValidationError(f"Soft labels must be rows, got shape {tuple(targets.shape)}")
    if bool((targets < 0).any()):
        raise LabelValidationError("Soft label rows contain negative entries")
    deviation = (targets.sum(dim=1) - 1.0).abs().max().item()
    if deviation > SOFT_LABEL_TOLERANCE:
        raise LabelValidationError(f"Soft label rows must sum to 1 (max deviation {deviation:.3e})")


def _check_params(params: ParamVector, spec: NetworkSpec):
    if params.dim() != 1 or params.numel() != spec.param_count:
        raise ShapeError(f"Parameter vector has shape {tuple(params.shape)}, spec needs ({spec.param_count},)")
    if not bool(torch.isfinite(params).all()):
        raise NumericError("Parameter vector contains non-finite values")


def _check_inputs(inputs: torch.Tensor, params: ParamVector, spec: NetworkSpec):
    if inputs.dim() != 2 or inputs.shape[1] != spec.input_dim:
        raise ShapeError(f"Inputs have shape {tuple(inputs.shape)}, spec expects (*, {spec.input_dim})")
    if inputs.dtype != params.dtype:
        raise ShapeError(f"Inputs are {inputs.dtype} but parameters are {params.dtype}")


def unflatten(params: ParamVector, spec: NetworkSpec) -> Dict[str, torch.Tensor]:
    """Views of the flat vector shaped per layer"""
    blocks = {}
    offset = 0
    for name, shape in spec.layer_shapes():
        size = math.prod(shape)
        blocks[name] = params[offset:offset + size].view(shape)
        offset += size
    return blocks


def apply_network(params: ParamVector, inputs: torch.Tensor, spec: NetworkSpec) -> torch.Tensor:
    """Unchecked functional forward; differentiable in params and inputs"""
    blocks = unflatten(params, spec)
    act = ACTIVATIONS[spec.activation]

    if spec.kind == "mlp":
        h = inputs
        for i in range(len(spec.hidden)):
            h = act(F.linear(h, blocks[f"fc{i}.weight"], blocks.get(f"fc{i}.bias")))
    else:
        h = inputs.reshape(-1, *spec.image_shape)
        for i in range(len(spec.hidden)):
            h = act(F.conv2d(h, blocks[f"conv{i}.weight"], blocks.get(f"conv{i}.bias"), padding=1))
            if h.shape[-2] >= 2 and h.shape[-1] >= 2:
                h = F.avg_pool2d(h, 2)
        h = h.flatten(1)

    return F.linear(h, blocks["head.weight"], blocks.get("head.bias"))


def forward(params: ParamVector, batch: Batch, spec: NetworkSpec) -> torch.Tensor:
    """Classification logits (rows x C) for the batch inputs"""
    _check_params(params, spec)
    _check_inputs(batch.inputs, params, spec)
    return apply_network(params, batch.inputs, spec)


def _cross_entropy(logits: torch.Tensor, labels: torch.Tensor, mode: LabelMode) -> torch.Tensor:
    if mode is LabelMode.HARD:
        return F.cross_entropy(logits, labels)
    return -(labels * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def loss(logits: torch.Tensor, labels: torch.Tensor, mode) -> torch.Tensor:
    """Mean cross-entropy between softmax(logits) and the targets"""
    mode = LabelMode(mode)
    if logits.dim() != 2 or logits.shape[1] < 2:
        raise ShapeError(f"Logits need at least 2 classes, got shape {tuple(logits.shape)}")
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"Row mismatch: {logits.shape[0]} logits vs {labels.shape[0]} labels")

    if mode is LabelMode.HARD:
        if labels.is_floating_point() or labels.dim() != 1:
            raise LabelValidationError("Hard mode expects a vector of class indices")
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
            raise LabelValidationError(f"Class index outside [0, {logits.shape[1]})")
    else:
        if labels.shape != logits.shape:
            raise LabelValidationError(f"Soft labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
        _check_soft_rows(labels)

    return _cross_entropy(logits, labels, mode)


def grad(params: ParamVector, batch: Batch, mode, spec: NetworkSpec) -> ParamVector:
    """Exact gradient of the batch loss w.r.t. the flat parameters"""
    _check_params(params, spec)
    _check_inputs(batch.inputs, params, spec)
    with torch.enable_grad():
        theta = params.detach().requires_grad_(True)
        value = loss(apply_network(theta, batch.inputs, spec), batch.labels, mode)
        (gradient,) = torch.autograd.grad(value, theta)
    return gradient.detach()


def synthetic_digest(syn) -> str:
    """Fingerprint of the synthetic tensors a tape was recorded against"""
    digest = hashlib.sha256(syn.label_mode.value.encode("utf-8"))
    digest.update(syn.images.detach().cpu().contiguous().numpy().tobytes())
    if syn.label_mode is LabelMode.SOFT:
        digest.update(syn.label_logits.detach().cpu().contiguous().numpy().tobytes())
    else:
        digest.update(syn.hard_labels.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def batch_schedule(num_rows: int, batch_size: int, steps: int, seed: int) -> List[Optional[torch.Tensor]]:
    """Row indices per inner step; None means the whole synthetic set"""
    if batch_size <= 0 or batch_size >= num_rows:
        return [None] * steps

    generator = torch.Generator().manual_seed(seed)
    batches: List[Optional[torch.Tensor]] = []
    while len(batches) < steps:
        order = torch.randperm(num_rows, generator=generator)
        batches.extend(torch.split(order, batch_size))
    return batches[:steps]


def _alpha_at(alpha: torch.Tensor, step: int) -> torch.Tensor:
    return alpha if alpha.dim() == 0 else alpha[step]


def _targets(syn) -> torch.Tensor:
    if syn.label_mode is LabelMode.SOFT:
        return F.softmax(syn.label_logits.detach(), dim=1)
    return syn.hard_labels.detach()


def _inner_step(theta: ParamVector, images: torch.Tensor, targets: torch.Tensor,
                rows: Optional[torch.Tensor], alpha: torch.Tensor, mode: LabelMode,
                spec: NetworkSpec) -> ParamVector:
    x = images if rows is None else images[rows]
    y = targets if rows is None else targets[rows]
    var = theta.detach().requires_grad_(True)
    value = _cross_entropy(apply_network(var, x, spec), y, mode)
    (gradient,) = torch.autograd.grad(value, var)
    return (theta - alpha * gradient).detach()


def unroll_inner(theta_start: ParamVector, syn, N: int, spec: NetworkSpec,
                 batch_size: int = 0, seed: int = 0) -> Tuple[ParamVector, UnrollTape]:
    """Run N plain SGD steps on the synthetic set starting from theta_start"""
    if N < 0:
        raise UnrollError(f"Inner step count must be >= 0, got {N}")
    _check_params(theta_start, spec)
    _check_inputs(syn.images, theta_start, spec)

    alpha = syn.alpha.detach()
    if alpha.dim() == 1 and alpha.numel() < N:
        raise UnrollError(f"Per-step alpha has {alpha.numel()} entries but the unroll needs {N}")

    images = syn.images.detach()
    targets = _targets(syn)
    batches = batch_schedule(images.shape[0], batch_size, N, seed)

    theta = theta_start.detach().clone()
    states: List[ParamVector] = []
    alphas: List[torch.Tensor] = []
    with torch.enable_grad():
        for step in range(N):
            states.append(theta)
            step_alpha = _alpha_at(alpha, step)
            theta = _inner_step(theta, images, targets, batches[step], step_alpha, syn.label_mode, spec)
            if not bool(torch.isfinite(theta).all()):
                raise DivergenceError(f"Inner step {step} produced non-finite parameters", step=step)
            alphas.append(step_alpha)

    tape = UnrollTape(
        theta_start=theta_start.detach().clone(),
        states=states,
        batches=batches,
        alphas=alphas,
        label_mode=syn.label_mode,
        num_rows=images.shape[0],
        syn_digest=synthetic_digest(syn),
        seed=seed,
    )
    return theta, tape


def _check_tape(tape: UnrollTape, syn):
    if tape.label_mode is not syn.label_mode:
        raise UnrollError(f"Tape was recorded in {tape.label_mode.value} mode, synthetic set is {syn.label_mode.value}")
    if tape.num_rows != syn.images.shape[0] or tape.syn_digest != synthetic_digest(syn):
        raise UnrollError("Tape does not belong to this synthetic dataset")


def replay_tape(tape: UnrollTape, syn, spec: NetworkSpec) -> ParamVector:
    """Re-execute the recorded steps; bitwise equal to the original end state"""
    _check_tape(tape, syn)
    images = syn.images.detach()
    targets = _targets(syn)
    theta = tape.theta_start.detach().clone()
    with torch.enable_grad():
        for rows, step_alpha in zip(tape.batches, tape.alphas):
            theta = _inner_step(theta, images, targets, rows, step_alpha, tape.label_mode, spec)
    return theta


def hypergrad(tape: UnrollTape, d_outer: ParamVector, syn, spec: NetworkSpec) -> HyperGradients:
    """Reverse sweep through the unroll with Hessian-vector products.

    For each step theta' = theta - a * g(theta, x, L) the adjoint v of theta'
    propagates as v <- v - a * H v, while the synthetic inputs, label logits
    and a collect -a * d<v, g>/dx, -a * d<v, g>/dL and -<v, g>. Intermediate
    states come from the tape, so memory stays O(P * N).
    """
    _check_tape(tape, syn)
    if d_outer.shape != tape.theta_start.shape:
        raise ShapeError(f"d_outer has shape {tuple(d_outer.shape)}, expected {tuple(tape.theta_start.shape)}")

    soft = tape.label_mode is LabelMode.SOFT
    images_var = syn.images.detach().clone().requires_grad_(True)
    logits_var = syn.label_logits.detach().clone().requires_grad_(True) if soft else None
    hard_labels = None if soft else syn.hard_labels.detach()

    grad_images = torch.zeros_like(images_var)
    grad_logits = torch.zeros_like(logits_var) if soft else images_var.new_zeros(0)
    grad_alpha = torch.zeros_like(syn.alpha.detach())
    per_step = grad_alpha.dim() == 1
    v = d_outer.detach().clone()

    with torch.enable_grad():
        for step in reversed(range(len(tape))):
            theta = tape.states[step].detach().requires_grad_(True)
            rows = tape.batches[step]
            step_alpha = tape.alphas[step]

            x = images_var if rows is None else images_var[rows]
            if soft:
                y = F.softmax(logits_var if rows is None else logits_var[rows], dim=1)
            else:
                y = hard_labels if rows is None else hard_labels[rows]

            value = _cross_entropy(apply_network(theta, x, spec), y, tape.label_mode)
            (gradient,) = torch.autograd.grad(value, theta, create_graph=True)
            inner = torch.dot(gradient, v)

            wrt = [theta, images_var] + ([logits_var] if soft else [])
            parts = torch.autograd.grad(inner, wrt, allow_unused=True)
            hvp = parts[0] if parts[0] is not None else torch.zeros_like(theta)

            if per_step:
                grad_alpha[step] -= inner.detach()
            else:
                grad_alpha -= inner.detach()
            if parts[1] is not None:
                grad_images -= step_alpha * parts[1]
            if soft and parts[2] is not None:
                grad_logits -= step_alpha * parts[2]
            v = v - step_alpha * hvp.detach()

    return HyperGradients(
        images=grad_images.detach(),
        label_logits=grad_logits.detach(),
        alpha=grad_alpha,
        theta_start=v,
    )
