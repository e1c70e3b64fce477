"""Contract tests for parameters, the pass driver, and the gradient oracle."""

import numpy as np
import pytest

from bevkd.diffcore import (
    GradReport,
    NonFiniteError,
    Parameter,
    ShapeError,
    check_grad,
    finite_diff_grad,
    forward_backward,
    grad_report,
)


class IdentityMSE:
    """Zero-parameter network: loss is the MSE between input and target."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def parameters(self):
        return []

    def loss_forward(self, inputs, selector):
        return float(np.mean((np.asarray(inputs) - self.target) ** 2))

    def loss_backward(self):
        pass


class SquaredWeight:
    """One scalar weight w; the loss is w**2 regardless of inputs."""

    def __init__(self, w):
        self.w = Parameter("w", np.array([float(w)]))

    def parameters(self):
        return [self.w]

    def loss_forward(self, inputs, selector):
        self._val = float(self.w.value[0] ** 2)
        return self._val

    def loss_backward(self):
        self.w.grad += 2.0 * self.w.value


class TestForwardBackward:
    def test_identity_network_zero_loss(self):
        x = np.array([1.0, -2.0, 3.0])
        loss, grads = forward_backward(IdentityMSE(x), x)
        assert loss == 0.0
        assert grads == {}

    def test_scalar_weight_squared(self):
        net = SquaredWeight(3.0)
        loss, grads = forward_backward(net, None)
        assert loss == 9.0
        np.testing.assert_array_equal(grads["w"], [6.0])

    def test_repeated_calls_bit_identical(self):
        net = SquaredWeight(1.7)
        loss1, grads1 = forward_backward(net, None)
        g1 = grads1["w"].copy()
        loss2, grads2 = forward_backward(net, None)
        assert loss1 == loss2
        np.testing.assert_array_equal(g1, grads2["w"])

    def test_non_finite_loss_raises(self):
        class Bad(IdentityMSE):
            def loss_forward(self, inputs, selector):
                return float("nan")

        with pytest.raises(NonFiniteError):
            forward_backward(Bad(np.zeros(1)), np.zeros(1))

    def test_non_finite_names_first_bad_intermediate(self):
        class BadWithProbe(IdentityMSE):
            def loss_forward(self, inputs, selector):
                return float("inf")

            def intermediates(self):
                yield "clean", np.ones(3)
                yield "poisoned", np.array([1.0, np.nan])
                yield "also_bad", np.array([np.inf])

        with pytest.raises(NonFiniteError) as err:
            forward_backward(BadWithProbe(np.zeros(1)), np.zeros(1))
        assert err.value.where == "poisoned"


class TestFiniteDiff:
    def test_square_at_three(self):
        g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-4)
        assert abs(g[0] - 6.0) <= 1e-7

    def test_constant_function(self):
        g = finite_diff_grad(lambda x: 4.2, np.ones((2, 3)), 1e-4)
        np.testing.assert_array_equal(g, np.zeros((2, 3)))

    def test_sum_of_squares_matches_2x(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=5)
        g = finite_diff_grad(lambda v: float(np.sum(v**2)), x, 1e-4)
        np.testing.assert_allclose(g, 2.0 * x, atol=1e-6)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda x: 0.0, np.ones(1), 0.0)

    def test_non_finite_perturbed_loss(self):
        def loss(x):
            return float("nan") if x[0] > 1.0 else float(x[0])

        with pytest.raises(NonFiniteError):
            finite_diff_grad(loss, np.array([1.0]), 0.5)


class TestGradReport:
    def test_fields_and_nonnegative(self):
        rep = grad_report("p", np.array([1.0, 2.0]), np.array([1.0, 2.0 + 1e-6]))
        assert isinstance(rep, GradReport)
        assert rep.name == "p"
        assert rep.max_rel_err >= 0
        assert rep.analytic_norm > 0 and rep.numeric_norm > 0

    def test_zero_gradients_compare_clean(self):
        rep = grad_report("z", np.zeros(4), np.zeros(4))
        assert rep.max_rel_err == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            grad_report("p", np.zeros(3), np.zeros(4))

    def test_check_grad_runs_oracle(self):
        x = np.array([1.0, -2.0])
        rep = check_grad("sq", lambda v: float(np.sum(v**2)), x, 2.0 * x)
        assert rep.max_rel_err <= 1e-6


class TestParameter:
    def test_grad_buffer_matches_shape(self):
        p = Parameter("w", np.ones((2, 3)))
        assert p.grad.shape == (2, 3)
        p.grad += 1.0
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, np.zeros((2, 3)))
