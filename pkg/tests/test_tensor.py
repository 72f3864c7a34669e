"""
Tests for the tensor core: arithmetic, convolution, reverse-mode gradients
and the finite-difference checker.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from models.errors import ContractError, DimensionError, NumericalError, ParameterError
from models.tensor import (
    Tensor,
    backward,
    concat,
    conv2d,
    grad_check,
    grad_check_parameters,
    log,
    reduce_sum,
    relu,
    softmax,
    stack,
    upsample_nearest,
)


class TestConv2d:
    def test_one_by_one_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(1, 5, 5)))
        out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
        assert_allclose(out.values, x.values)

    def test_hand_convolution(self):
        x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        k = Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        out = conv2d(x, k)
        assert out.shape == (1, 1, 1)
        assert out.values[0, 0, 0] == 5.0

    def test_zero_kernel_gives_bias(self, rng):
        x = Tensor(rng.normal(size=(2, 6, 6)))
        out = conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), Tensor([0.5, -1.0, 2.0]), padding=1)
        assert out.shape == (3, 6, 6)
        for c, b in enumerate([0.5, -1.0, 2.0]):
            assert np.all(out.values[c] == b)

    def test_output_extent_with_stride(self, rng):
        x = Tensor(rng.normal(size=(1, 9, 9)))
        out = conv2d(x, Tensor(rng.normal(size=(2, 1, 3, 3))), stride=2, padding=1)
        assert out.shape == (2, 5, 5)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            conv2d(Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.normal(size=(1, 3, 3, 3))))

    def test_gradients_match_finite_differences(self, rng):
        kernels = rng.normal(size=(2, 1, 3, 3))
        bias = rng.normal(size=2)

        def f(x):
            out = conv2d(x, Tensor(kernels), Tensor(bias), stride=2, padding=1)
            return reduce_sum(relu(out) * out)

        assert grad_check(f, rng.normal(size=(1, 4, 4)), eps=1e-5) <= 1e-6

    def test_kernel_and_bias_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 5)))
        kernels = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        bias = Tensor(rng.normal(size=3), requires_grad=True)

        def loss():
            return reduce_sum(conv2d(x, kernels, bias, padding=1) ** 2)

        assert grad_check_parameters(loss, [kernels, bias], eps=1e-5) <= 1e-6


class TestElementwise:
    def test_relu_examples(self):
        out = relu(Tensor([-1.0, 0.0, 2.5]))
        assert_array_equal(out.values, [0.0, 0.0, 2.5])

    def test_softmax_symmetry(self):
        assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).values, [1 / 3] * 3)

    def test_concat(self):
        out = concat([Tensor([1.0, 2.0]), Tensor([3.0])])
        assert_array_equal(out.values, [1.0, 2.0, 3.0])

    def test_nonconforming_shapes(self):
        with pytest.raises(DimensionError):
            Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])
        with pytest.raises(DimensionError):
            concat([Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 3)))])
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))

    def test_non_finite_names_the_operation(self):
        with pytest.raises(NumericalError, match="log"):
            log(Tensor([0.0]))

    def test_upsample_gradient(self, rng):
        assert grad_check(lambda x: reduce_sum(upsample_nearest(x) ** 2), rng.normal(size=(2, 2, 3))) <= 1e-7

    def test_stack_gradient(self, rng):
        def f(x):
            return reduce_sum(stack([x, x * 2.0], axis=1) ** 2)

        assert grad_check(f, rng.normal(size=(3,))) <= 1e-7


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        backward((x * x).sum())
        assert_allclose(x.grad, [6.0])

    def test_dead_relu(self):
        x = Tensor([1.0], requires_grad=True)
        backward(relu(-x).sum())
        assert_allclose(x.grad, [0.0])

    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        backward((y + y * x).sum())
        # d/dx (x^2 + x^3) = 2x + 3x^2
        assert_allclose(x.grad, [16.0])

    def test_repeated_backward_is_idempotent(self):
        x = Tensor([1.5], requires_grad=True)
        loss = (x * x * x).sum()
        backward(loss)
        first = x.grad.copy()
        backward(loss)
        assert_array_equal(x.grad, first)

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_tape_is_topological(self):
        x = Tensor([1.0], requires_grad=True)
        loss = ((x * 2.0) + x).sum()
        tape = backward(loss)
        position = {id(node): i for i, node in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]


class TestGradCheck:
    def test_sum_of_squares(self, rng):
        assert grad_check(lambda x: reduce_sum(x * x), rng.normal(size=(4, 3)), eps=1e-5) <= 1e-7

    def test_constant_function(self):
        assert grad_check(lambda x: Tensor(3.0), [1.0, 2.0]) == 0.0

    def test_rejects_bad_step(self):
        with pytest.raises(ParameterError):
            grad_check(lambda x: reduce_sum(x), [1.0], eps=0.5)
