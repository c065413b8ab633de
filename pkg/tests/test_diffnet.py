#!/usr/bin/env python3
"""
Tests for the differentiable surrogate network and the unrolled hypergradients
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent.parent))

from core.diffnet import (
    Batch,
    LabelMode,
    NetworkSpec,
    forward,
    grad,
    hypergrad,
    loss,
    replay_tape,
    unroll_inner,
)
from core.errors import (
    DivergenceError,
    LabelValidationError,
    NumericError,
    ShapeError,
    UnrollError,
)
from core.synthetic import SyntheticDataset

TANH_SPEC = NetworkSpec(input_dim=3, num_classes=3, hidden=(4,), activation="tanh")


def make_syn(spec, ipc, mode, alpha=0.1, seed=0, per_step=0):
    """Random double-precision synthetic set for the given spec"""
    generator = torch.Generator().manual_seed(seed)
    rows = spec.num_classes * ipc
    images = torch.randn(rows, spec.input_dim, generator=generator, dtype=torch.float64)
    hard = torch.arange(spec.num_classes).repeat_interleave(ipc)
    alpha_value = torch.full((per_step,), alpha, dtype=torch.float64) if per_step else torch.tensor(alpha, dtype=torch.float64)
    if mode is LabelMode.SOFT:
        logits = torch.randn(rows, spec.num_classes, generator=generator, dtype=torch.float64)
        return SyntheticDataset(images, mode, spec.num_classes, ipc, alpha_value, label_logits=logits)
    return SyntheticDataset(images, mode, spec.num_classes, ipc, alpha_value, hard_labels=hard)


def random_params(spec, seed=0, scale=0.5):
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(spec.param_count, generator=generator, dtype=torch.float64) * scale


def unroll_dot(theta, syn, N, spec, direction, batch_size=0, seed=0):
    theta_end, _ = unroll_inner(theta, syn, N, spec, batch_size=batch_size, seed=seed)
    return float(torch.dot(direction, theta_end))


def perturbed(syn, attribute, index, delta):
    copy = syn.clone()
    with torch.no_grad():
        getattr(copy, attribute)[index] += delta
    return copy


def finite_difference(syn, attribute, theta, N, spec, direction, h=1e-5, batch_size=0, seed=0):
    """Central differences of <direction, theta_end> over every entry of a synthetic tensor"""
    target = getattr(syn, attribute)
    estimate = torch.zeros_like(target.detach())
    for index in np.ndindex(*target.shape):
        plus = unroll_dot(theta, perturbed(syn, attribute, index, h), N, spec, direction, batch_size, seed)
        minus = unroll_dot(theta, perturbed(syn, attribute, index, -h), N, spec, direction, batch_size, seed)
        estimate[index] = (plus - minus) / (2 * h)
    return estimate


class TestNetworkSpec:
    """Test surrogate architecture descriptions"""

    def test_mlp_param_count(self):
        """Test P for a one-hidden-layer MLP with biases"""
        assert TANH_SPEC.param_count == 3 * 4 + 4 + 4 * 3 + 3

    def test_conv_param_count(self):
        """Test P for a conv block followed by pooling and a linear head"""
        spec = NetworkSpec(input_dim=32, num_classes=3, hidden=(3,), kind="conv", image_shape=(2, 4, 4))
        assert spec.param_count == 3 * 2 * 3 * 3 + 3 + 3 * 3 * 2 * 2 + 3

    def test_same_spec_same_digest(self):
        """Test equal architectures share P and digest"""
        other = NetworkSpec.from_dict(TANH_SPEC.describe())
        assert other.param_count == TANH_SPEC.param_count
        assert other.digest() == TANH_SPEC.digest()
        assert NetworkSpec(input_dim=3, num_classes=3, hidden=(5,)).digest() != TANH_SPEC.digest()

    def test_invalid_specs(self):
        """Test malformed architectures are rejected"""
        with pytest.raises(ShapeError):
            NetworkSpec(input_dim=0, num_classes=3)
        with pytest.raises(ShapeError):
            NetworkSpec(input_dim=4, num_classes=3, activation="gelu-ish")
        with pytest.raises(ShapeError):
            NetworkSpec(input_dim=16, num_classes=3, kind="conv")


class TestForward:
    """Test the functional forward pass"""

    def test_zero_parameters_give_zero_logits(self):
        """Test a linear head with zero weights outputs zeros"""
        spec = NetworkSpec(input_dim=3, num_classes=3, hidden=())
        inputs = torch.randn(5, 3, dtype=torch.float64)
        logits = forward(torch.zeros(spec.param_count, dtype=torch.float64), Batch(inputs, torch.zeros(5, dtype=torch.long)), spec)
        assert logits.shape == (5, 3)
        assert torch.equal(logits, torch.zeros(5, 3, dtype=torch.float64))

    def test_identity_head(self):
        """Test identity weights map basis vectors onto themselves"""
        spec = NetworkSpec(input_dim=3, num_classes=3, hidden=())
        params = torch.cat([torch.eye(3, dtype=torch.float64).flatten(), torch.zeros(3, dtype=torch.float64)])
        inputs = torch.eye(3, dtype=torch.float64)
        logits = forward(params, Batch(inputs, torch.arange(3)), spec)
        assert torch.equal(logits, inputs)

    def test_matches_numpy_oracle(self):
        """Test a two-layer ReLU network against a hand-written numpy forward"""
        spec = NetworkSpec(input_dim=4, num_classes=3, hidden=(5,))
        params = random_params(spec, seed=3)
        inputs = torch.randn(6, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
        logits = forward(params, Batch(inputs, torch.zeros(6, dtype=torch.long)), spec).numpy()

        p = params.numpy()
        w1, b1 = p[:20].reshape(5, 4), p[20:25]
        w2, b2 = p[25:40].reshape(3, 5), p[40:43]
        x = inputs.numpy()
        expected = np.maximum(x @ w1.T + b1, 0.0) @ w2.T + b2
        assert np.allclose(logits, expected, rtol=0, atol=1e-12)

    def test_shape_and_numeric_errors(self):
        """Test wrong parameter length, wrong input width and NaN parameters"""
        params = random_params(TANH_SPEC)
        labels = torch.zeros(2, dtype=torch.long)
        with pytest.raises(ShapeError):
            forward(params[:-1], Batch(torch.zeros(2, 3, dtype=torch.float64), labels), TANH_SPEC)
        with pytest.raises(ShapeError):
            forward(params, Batch(torch.zeros(2, 4, dtype=torch.float64), labels), TANH_SPEC)
        broken = params.clone()
        broken[0] = float("nan")
        with pytest.raises(NumericError):
            forward(broken, Batch(torch.zeros(2, 3, dtype=torch.float64), labels), TANH_SPEC)


class TestLoss:
    """Test cross-entropy against hard and soft targets"""

    def test_uniform_logits(self):
        """Test equal logits give ln C"""
        value = loss(torch.zeros(4, 5, dtype=torch.float64), torch.tensor([0, 1, 2, 3]), LabelMode.HARD)
        assert abs(float(value) - math.log(5)) < 1e-12

    def test_known_two_class_value(self):
        """Test logits [2, 0] with label 0"""
        value = loss(torch.tensor([[2.0, 0.0]], dtype=torch.float64), torch.tensor([0]), "hard")
        assert abs(float(value) + math.log(math.exp(2) / (math.exp(2) + 1))) < 1e-12

    def test_soft_target_equal_to_prediction_is_entropy(self):
        """Test the loss equals the entropy of softmax(logits) when the target is that softmax"""
        logits = torch.tensor([[0.3, -1.2, 2.0]], dtype=torch.float64)
        p = torch.softmax(logits, dim=1)
        entropy = -float((p * p.log()).sum())
        assert abs(float(loss(logits, p, LabelMode.SOFT)) - entropy) < 1e-12

    def test_shift_invariance(self):
        """Test adding a constant to every logit leaves the loss unchanged"""
        logits = torch.randn(6, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        labels = torch.tensor([0, 1, 2, 3, 0, 1])
        base = float(loss(logits, labels, LabelMode.HARD))
        assert abs(float(loss(logits + 37.5, labels, LabelMode.HARD)) - base) < 1e-9

    def test_invalid_labels(self):
        """Test out-of-range indices and soft rows that do not sum to one"""
        logits = torch.zeros(2, 3, dtype=torch.float64)
        with pytest.raises(LabelValidationError):
            loss(logits, torch.tensor([0, 3]), LabelMode.HARD)
        with pytest.raises(LabelValidationError):
            loss(logits, torch.full((2, 3), 0.5, dtype=torch.float64), LabelMode.SOFT)
        with pytest.raises(LabelValidationError):
            Batch(torch.zeros(2, 3, dtype=torch.float64), torch.full((2, 3), 0.5, dtype=torch.float64))


class TestGrad:
    """Test first-order gradients of the surrogate loss"""

    def test_matches_central_differences(self):
        """Test every coordinate against central differences in double precision"""
        params = random_params(TANH_SPEC, seed=2)
        inputs = torch.randn(5, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
        batch = Batch(inputs, torch.tensor([0, 1, 2, 0, 1]))
        gradient = grad(params, batch, LabelMode.HARD, TANH_SPEC)

        h = 1e-5
        estimate = torch.zeros_like(params)
        for i in range(params.numel()):
            step = torch.zeros_like(params)
            step[i] = h
            plus = loss(forward(params + step, batch, TANH_SPEC), batch.labels, LabelMode.HARD)
            minus = loss(forward(params - step, batch, TANH_SPEC), batch.labels, LabelMode.HARD)
            estimate[i] = (plus - minus) / (2 * h)
        torch.testing.assert_close(gradient, estimate, rtol=1e-6, atol=1e-9)

    def test_stationary_when_targets_match_predictions(self):
        """Test soft targets equal to the current predictions give a zero gradient"""
        params = random_params(TANH_SPEC, seed=7)
        inputs = torch.randn(4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(8))
        logits = forward(params, Batch(inputs, torch.zeros(4, dtype=torch.long)), TANH_SPEC)
        targets = torch.softmax(logits, dim=1)
        gradient = grad(params, Batch(inputs, targets), LabelMode.SOFT, TANH_SPEC)
        assert float(gradient.norm()) < 1e-8

    def test_duplicated_rows_do_not_change_gradient(self):
        """Test the batch mean makes duplicating every row a no-op"""
        params = random_params(TANH_SPEC, seed=9)
        inputs = torch.randn(3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(10))
        labels = torch.tensor([2, 0, 1])
        single = grad(params, Batch(inputs, labels), LabelMode.HARD, TANH_SPEC)
        doubled = grad(params, Batch(torch.cat([inputs, inputs]), torch.cat([labels, labels])), LabelMode.HARD, TANH_SPEC)
        torch.testing.assert_close(single, doubled, rtol=0, atol=1e-12)

    def test_hard_equals_one_hot_soft(self):
        """Test hard labels and one-hot soft rows produce the same gradient"""
        params = random_params(TANH_SPEC, seed=11)
        inputs = torch.randn(6, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(12))
        labels = torch.tensor([0, 1, 2, 2, 1, 0])
        one_hot = torch.nn.functional.one_hot(labels, 3).to(torch.float64)
        hard = grad(params, Batch(inputs, labels), LabelMode.HARD, TANH_SPEC)
        soft = grad(params, Batch(inputs, one_hot), LabelMode.SOFT, TANH_SPEC)
        assert float((hard - soft).abs().max()) <= 1e-10


class TestUnrollInner:
    """Test the recorded inner SGD unroll"""

    def test_zero_steps_return_start(self):
        """Test N = 0 returns theta_start and an empty tape"""
        theta = random_params(TANH_SPEC)
        theta_end, tape = unroll_inner(theta, make_syn(TANH_SPEC, 2, LabelMode.HARD), 0, TANH_SPEC)
        assert torch.equal(theta_end, theta)
        assert len(tape) == 0

    def test_zero_alpha_is_identity(self):
        """Test a zero step size leaves the parameters bitwise unchanged"""
        theta = random_params(TANH_SPEC)
        theta_end, _ = unroll_inner(theta, make_syn(TANH_SPEC, 2, LabelMode.HARD, alpha=0.0), 5, TANH_SPEC)
        assert torch.equal(theta_end, theta)

    def test_single_step_is_one_sgd_update(self):
        """Test N = 1 on the full set equals theta - alpha * grad"""
        theta = random_params(TANH_SPEC, seed=1)
        syn = make_syn(TANH_SPEC, 2, LabelMode.HARD, alpha=0.3)
        theta_end, _ = unroll_inner(theta, syn, 1, TANH_SPEC)
        expected = theta - 0.3 * grad(theta, Batch(syn.images.detach(), syn.hard_labels), LabelMode.HARD, TANH_SPEC)
        torch.testing.assert_close(theta_end, expected, rtol=0, atol=1e-12)

    def test_negative_steps_rejected(self):
        """Test N < 0 raises UnrollError"""
        with pytest.raises(UnrollError):
            unroll_inner(random_params(TANH_SPEC), make_syn(TANH_SPEC, 2, LabelMode.HARD), -1, TANH_SPEC)

    def test_divergence_reports_step(self):
        """Test exploding parameters raise DivergenceError at the first step"""
        spec = NetworkSpec(input_dim=3, num_classes=3, hidden=())
        syn = make_syn(spec, 2, LabelMode.HARD, alpha=1e300)
        with torch.no_grad():
            syn.images.mul_(1e300)
        with pytest.raises(DivergenceError) as excinfo:
            unroll_inner(random_params(spec), syn, 3, spec)
        assert excinfo.value.step == 0

    def test_replay_is_bitwise(self):
        """Test replaying the tape reproduces theta_end exactly"""
        syn = make_syn(TANH_SPEC, 3, LabelMode.SOFT, seed=4)
        theta_end, tape = unroll_inner(random_params(TANH_SPEC, seed=4), syn, 6, TANH_SPEC, batch_size=4, seed=99)
        assert torch.equal(replay_tape(tape, syn, TANH_SPEC), theta_end)

    def test_minibatch_schedule_is_seeded(self):
        """Test the same seed gives the same batches and a different seed differs"""
        syn = make_syn(TANH_SPEC, 3, LabelMode.HARD)
        theta = random_params(TANH_SPEC)
        _, first = unroll_inner(theta, syn, 4, TANH_SPEC, batch_size=2, seed=5)
        _, second = unroll_inner(theta, syn, 4, TANH_SPEC, batch_size=2, seed=5)
        assert len(first.batches) == 4
        assert all(torch.equal(a, b) for a, b in zip(first.batches, second.batches))
        assert all(rows.numel() <= 2 for rows in first.batches)

    def test_tape_rejects_modified_synthetic_set(self):
        """Test a tape cannot be replayed against changed images"""
        syn = make_syn(TANH_SPEC, 2, LabelMode.HARD)
        _, tape = unroll_inner(random_params(TANH_SPEC), syn, 2, TANH_SPEC)
        with torch.no_grad():
            syn.images[0, 0] += 1.0
        with pytest.raises(UnrollError):
            replay_tape(tape, syn, TANH_SPEC)


class TestHypergrad:
    """Test exact hypergradients through the unroll"""

    def test_zero_outer_gradient(self):
        """Test d_outer = 0 yields all-zero hypergradients"""
        syn = make_syn(TANH_SPEC, 2, LabelMode.SOFT)
        _, tape = unroll_inner(random_params(TANH_SPEC), syn, 3, TANH_SPEC)
        result = hypergrad(tape, torch.zeros(TANH_SPEC.param_count, dtype=torch.float64), syn, TANH_SPEC)
        assert not result.images.any()
        assert not result.label_logits.any()
        assert not result.alpha.any()

    def test_single_step_alpha_gradient(self):
        """Test N = 1 gives d/d alpha = -<d_outer, grad at theta_start>"""
        syn = make_syn(TANH_SPEC, 2, LabelMode.HARD, alpha=0.2)
        theta = random_params(TANH_SPEC, seed=6)
        direction = random_params(TANH_SPEC, seed=7, scale=1.0)
        _, tape = unroll_inner(theta, syn, 1, TANH_SPEC)
        result = hypergrad(tape, direction, syn, TANH_SPEC)
        step_grad = grad(theta, Batch(syn.images.detach(), syn.hard_labels), LabelMode.HARD, TANH_SPEC)
        assert abs(float(result.alpha) + float(torch.dot(direction, step_grad))) < 1e-10

    def test_two_parameter_model_images(self):
        """Test image hypergradients of a two-parameter model over three steps"""
        spec = NetworkSpec(input_dim=1, num_classes=2, hidden=(), bias=False)
        assert spec.param_count == 2
        syn = make_syn(spec, 2, LabelMode.HARD, alpha=0.5, seed=13)
        theta = torch.tensor([0.3, -0.4], dtype=torch.float64)
        direction = torch.tensor([1.0, -2.0], dtype=torch.float64)
        _, tape = unroll_inner(theta, syn, 3, spec)
        result = hypergrad(tape, direction, syn, spec)
        estimate = finite_difference(syn, "images", theta, 3, spec, direction)
        torch.testing.assert_close(result.images, estimate, rtol=1e-4, atol=1e-8)

    @pytest.mark.parametrize("mode", [LabelMode.HARD, LabelMode.SOFT])
    def test_random_instances_match_finite_differences(self, mode):
        """Test images, label logits, alpha and theta_start on random small instances"""
        for instance in range(10):
            generator = np.random.default_rng(instance)
            N = int(generator.integers(1, 6))
            batch_size = int(generator.choice([0, 4]))
            syn = make_syn(TANH_SPEC, 2, mode, alpha=float(generator.uniform(0.05, 0.5)), seed=100 + instance)
            theta = random_params(TANH_SPEC, seed=200 + instance)
            direction = random_params(TANH_SPEC, seed=300 + instance, scale=1.0)

            _, tape = unroll_inner(theta, syn, N, TANH_SPEC, batch_size=batch_size, seed=instance)
            result = hypergrad(tape, direction, syn, TANH_SPEC)

            estimate = finite_difference(syn, "images", theta, N, TANH_SPEC, direction, batch_size=batch_size, seed=instance)
            torch.testing.assert_close(result.images, estimate, rtol=1e-4, atol=1e-8)
            if mode is LabelMode.SOFT:
                estimate = finite_difference(syn, "label_logits", theta, N, TANH_SPEC, direction,
                                             batch_size=batch_size, seed=instance)
                torch.testing.assert_close(result.label_logits, estimate, rtol=1e-4, atol=1e-8)
            else:
                assert result.label_logits.numel() == 0

            h = 1e-6
            plus = unroll_dot(theta, perturbed(syn, "alpha", (), h), N, TANH_SPEC, direction, batch_size, instance)
            minus = unroll_dot(theta, perturbed(syn, "alpha", (), -h), N, TANH_SPEC, direction, batch_size, instance)
            assert abs(float(result.alpha) - (plus - minus) / (2 * h)) <= 1e-4 * max(1.0, abs(float(result.alpha)))

            k = instance % TANH_SPEC.param_count
            shift = torch.zeros_like(theta)
            shift[k] = 1e-5
            fd_theta = (unroll_dot(theta + shift, syn, N, TANH_SPEC, direction, batch_size, instance)
                        - unroll_dot(theta - shift, syn, N, TANH_SPEC, direction, batch_size, instance)) / 2e-5
            assert abs(float(result.theta_start[k]) - fd_theta) <= 1e-4 * max(1.0, abs(fd_theta))

    def test_per_step_alpha(self):
        """Test each step's rate receives its own gradient"""
        syn = make_syn(TANH_SPEC, 2, LabelMode.HARD, alpha=0.2, per_step=3)
        theta = random_params(TANH_SPEC, seed=21)
        direction = random_params(TANH_SPEC, seed=22, scale=1.0)
        _, tape = unroll_inner(theta, syn, 3, TANH_SPEC)
        result = hypergrad(tape, direction, syn, TANH_SPEC)
        assert result.alpha.shape == (3,)
        estimate = finite_difference(syn, "alpha", theta, 3, TANH_SPEC, direction, h=1e-6)
        torch.testing.assert_close(result.alpha, estimate, rtol=1e-4, atol=1e-8)

    def test_wrong_direction_shape(self):
        """Test d_outer must have P entries"""
        syn = make_syn(TANH_SPEC, 2, LabelMode.HARD)
        _, tape = unroll_inner(random_params(TANH_SPEC), syn, 1, TANH_SPEC)
        with pytest.raises(ShapeError):
            hypergrad(tape, torch.zeros(3, dtype=torch.float64), syn, TANH_SPEC)
