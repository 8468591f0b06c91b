import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dsbn.errors import DimensionError
from dsbn.tensor import (
    Parameter,
    Tensor,
    affine_transform,
    backward,
    exp,
    finite_difference_grad,
    grad_reverse,
    log,
    matmul,
    no_grad,
    relative_error,
    relu,
    sigmoid_bce,
    softmax,
    softmax_cross_entropy,
    sqrt,
)

GRAD_TOL = 1e-5


def check_grad(build, *arrays):
    """Compare autodiff gradients of ``build(*tensors)`` with central differences."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(*leaves))
    for leaf in leaves:
        numeric = finite_difference_grad(lambda: build(*[Tensor(l.data) for l in leaves]).item(), leaf.data)
        assert relative_error(leaf.grad, numeric) < GRAD_TOL


class TestAffine:
    def test_identity(self):
        y = affine_transform([[1.0, 2.0]], np.eye(2), [0.0, 0.0])
        np.testing.assert_array_equal(y.data, [[1.0, 2.0]])

    def test_hand_case(self):
        y = affine_transform([[1.0, 1.0]], [[2.0], [3.0]], [1.0])
        np.testing.assert_array_equal(y.data, [[6.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
            affine_transform(np.ones((1, 3)), np.ones((2, 2)), np.ones(2))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
        r = rng.normal(size=(4, 2))
        check_grad(lambda x, w, b: (affine_transform(x, w, b) * r).sum(), x, w, b)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        x = Tensor(-np.arange(1.0, 5.0), requires_grad=True)
        y = relu(x)
        backward(y.sum())
        np.testing.assert_array_equal(y.data, 0.0)
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_gradient_mask(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 4))
        x[np.abs(x) < 0.05] = 0.5  # keep away from the kink
        leaf = Tensor(x, requires_grad=True)
        backward(relu(leaf).sum())
        np.testing.assert_array_equal(leaf.grad, (x > 0).astype(float))
        numeric = finite_difference_grad(lambda: relu(Tensor(x)).sum().item(), x)
        np.testing.assert_allclose(leaf.grad, numeric, atol=1e-8)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = softmax_cross_entropy(np.zeros((3, 4)), [0, 1, 3])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-15)

    def test_large_margin_goes_to_zero(self):
        loss = softmax_cross_entropy([[1000.0, 0.0, 0.0]], [0])
        assert loss.item() == 0.0

    def test_against_direct_probabilities(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(7, 5))
        y = rng.integers(0, 5, 7)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        direct = -np.mean(np.log(p[np.arange(7), y]))
        assert abs(softmax_cross_entropy(z, y).item() - direct) < 1e-10

    def test_weighted_against_direct(self):
        rng = np.random.default_rng(1)
        z, y, w = rng.normal(size=(5, 3)), rng.integers(0, 3, 5), rng.uniform(1, 3, 5)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        direct = np.sum(-w * np.log(p[np.arange(5), y])) / 5
        assert abs(softmax_cross_entropy(z, y, w).item() - direct) < 1e-10

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(np.zeros((2, 3)), [0, 3])

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 4, 6)
        w = rng.uniform(0.5, 2.0, 6)
        check_grad(lambda z: softmax_cross_entropy(z, y, w), rng.normal(size=(6, 4)))


class TestSigmoidBce:
    def test_zero_score(self):
        assert sigmoid_bce([0.0], [1]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_confident_correct(self):
        assert sigmoid_bce([800.0], [1]).item() == 0.0

    def test_against_naive(self):
        rng = np.random.default_rng(0)
        s = rng.normal(scale=3, size=20)
        t = rng.integers(0, 2, 20)
        sig = 1 / (1 + np.exp(-s))
        naive = -np.mean(t * np.log(sig) + (1 - t) * np.log(1 - sig))
        assert abs(sigmoid_bce(s, t).item() - naive) < 1e-10

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            sigmoid_bce([0.0], [0.5])

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        t = rng.integers(0, 2, 8)
        w = rng.uniform(0.5, 2.0, 8)
        check_grad(lambda s: sigmoid_bce(s, t, w), rng.normal(scale=2, size=8))


class TestGradReverse:
    def test_forward_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 2))
        np.testing.assert_array_equal(grad_reverse(x, 0.7).data, x)

    def test_zero_scale_blocks_gradient(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        backward((grad_reverse(x, 0.0) * 3.0).sum())
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_negates_downstream_gradient(self):
        rng = np.random.default_rng(1)
        x0, r = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        plain = Tensor(x0, requires_grad=True)
        backward((plain * plain * r).sum())
        reversed_ = Tensor(x0, requires_grad=True)
        backward((grad_reverse(reversed_, 1.0) * grad_reverse(reversed_, 1.0) * r).sum())
        np.testing.assert_array_equal(reversed_.grad, -plain.grad)

    def test_negative_scale_rejected(self):
        with pytest.raises(ValueError):
            grad_reverse(np.ones(2), -1.0)


class TestBackward:
    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_repeated_calls_accumulate(self):
        w = Parameter(np.array([1.0, 2.0]))
        for _ in range(3):
            backward((w * w).sum())
        np.testing.assert_array_equal(w.grad, 3 * 2 * w.data)

    def test_retained_graph_accumulates(self):
        w = Parameter(np.array([1.5]))
        loss = (w * 4.0).sum()
        backward(loss, retain_graph=True)
        backward(loss)
        np.testing.assert_array_equal(w.grad, [8.0])

    def test_frozen_parameter_gets_no_grad(self):
        w = Parameter(np.ones(2), trainable=False)
        v = Parameter(np.ones(2))
        backward((w * v).sum())
        assert w.grad is None and v.grad is not None

    def test_shared_subexpression_sum_rule(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(3, 3))
        shared = Tensor(x0, requires_grad=True)
        h = exp(shared * 0.3)
        backward((h * h + h).sum())
        # oracle: each use of h recomputed as its own subgraph
        dup = Tensor(x0, requires_grad=True)
        backward((exp(dup * 0.3) * exp(dup * 0.3) + exp(dup * 0.3)).sum())
        np.testing.assert_allclose(shared.grad, dup.grad, rtol=1e-14)

    def test_no_grad_builds_no_graph(self):
        w = Parameter(np.ones(2))
        with no_grad():
            y = (w * 2.0).sum()
        assert not y.requires_grad and y.is_leaf

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(5)
        x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
        a = softmax(affine_transform(x, w, b)).data
        np.testing.assert_array_equal(a, softmax(affine_transform(x, w, b)).data)


@pytest.mark.parametrize("seed", range(4))
def test_elementwise_ops_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 2.0, size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(1, 4))
    check_grad(lambda a, b: (log(a * b + 1.0) / sqrt(a) - (a - b) ** 3 + exp(-a)).mean(), a, b)


@pytest.mark.parametrize("seed", range(4))
def test_matmul_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    r = rng.normal(size=(5, 3))
    check_grad(lambda a, b: (softmax(matmul(a, b)) * r).sum(), rng.normal(size=(5, 4)), rng.normal(size=(4, 3)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5)))
def test_grad_buffer_matches_value_shape(x):
    leaf = Tensor(x, requires_grad=True)
    backward((relu(leaf) * 2.0 + leaf).sum())
    assert leaf.grad.shape == leaf.data.shape


def test_relu_propagates_nan():
    assert np.isnan(relu([np.nan, 1.0]).data[0])
