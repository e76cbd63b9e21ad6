"""Autodiff core: elementwise ops, graph traversal, accumulation rules."""

import numpy as np
import pytest

from polsarseg.engine import (
    Tensor, add, backward, concat, mul, no_grad, relu, softmax, tensor_sum,
)
from polsarseg.errors import ShapeError, UsageError


class TestElementwise:
    def test_relu_values(self):
        x = Tensor(np.array([-2.0, 3.0]))
        assert relu(x).data.tolist() == [0.0, 3.0]

    def test_add_requires_identical_shapes(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_add_gradient_passes_through_to_both_parents(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        backward(tensor_sum(add(a, b)))
        assert np.array_equal(a.grad, np.ones((2, 2)))
        assert np.array_equal(b.grad, np.ones((2, 2)))

    def test_softmax_uniform_logits_six_channels(self):
        p = softmax(Tensor(np.zeros((1, 6, 2, 2))), axis=1)
        assert np.allclose(p.data, 1.0 / 6.0)

    def test_softmax_channels_sum_to_one(self):
        rng = np.random.default_rng(3)
        p = softmax(Tensor(rng.normal(size=(2, 5, 3, 3))), axis=1)
        assert np.allclose(p.data.sum(axis=1), 1.0, atol=1e-6)

    def test_concat_channel_axis(self):
        a = Tensor(np.zeros((1, 2, 4, 4)))
        b = Tensor(np.ones((1, 3, 4, 4)))
        out = concat([a, b], axis=1)
        assert out.shape == (1, 5, 4, 4)
        assert np.array_equal(out.data[:, :2], a.data)

    def test_concat_rejects_mismatched_spatial(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 4)))])

    def test_concat_gradient_splits(self):
        a = Tensor(np.zeros((1, 2, 2, 2)), requires_grad=True)
        b = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        backward(tensor_sum(mul(concat([a, b]), 3.0)))
        assert np.allclose(a.grad, 3.0)
        assert np.allclose(b.grad, 3.0)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4, 5)), requires_grad=True)
        backward(tensor_sum(x))
        assert np.array_equal(x.grad, np.ones((3, 4, 5)))

    def test_quadratic_gradient(self):
        x = Tensor(np.full((4,), 3.0), requires_grad=True)
        backward(tensor_sum(mul(x, x)))
        assert np.allclose(x.grad, 6.0)

    def test_fanout_accumulates(self):
        x = Tensor(np.ones((2,)), requires_grad=True)
        y = add(x, x)          # x used twice
        z = add(y, x)          # and a third time
        backward(tensor_sum(z))
        assert np.allclose(x.grad, 3.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(UsageError):
            backward(add(x, x))

    def test_graph_released_after_backward(self):
        x = Tensor(np.ones((2,)), requires_grad=True)
        y = mul(x, x)
        loss = tensor_sum(y)
        backward(loss)
        assert y._parents == () and y._grad_fn is None and y.grad is None
        assert x.grad is not None

    def test_no_grad_suppresses_recording(self):
        x = Tensor(np.ones((2,)), requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert y._grad_fn is None and not y.requires_grad

    def test_deep_chain_does_not_recurse(self):
        # graph much deeper than the default recursion limit
        x = Tensor(np.ones((1,)), requires_grad=True)
        y = x
        for _ in range(5000):
            y = add(y, 0.0)
        backward(tensor_sum(y))
        assert np.allclose(x.grad, 1.0)

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(7)
        data = rng.normal(size=(3, 3)).astype(np.float32)
        outs = []
        grads = []
        for _ in range(2):
            x = Tensor(data.copy(), requires_grad=True)
            y = relu(mul(x, x))
            outs.append(y.data.copy())
            backward(tensor_sum(y))
            grads.append(x.grad.copy())
        assert np.array_equal(outs[0], outs[1])
        assert np.array_equal(grads[0], grads[1])
