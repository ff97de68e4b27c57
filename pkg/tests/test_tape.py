"""Autodiff engine: gradients, the finite-difference oracle, and Adam."""

import copy

import numpy as np
import pytest

from hypergpa import gradcheck
from hypergpa import tape as tp
from hypergpa.optim import AdamState, DivergenceError, adam_step
from hypergpa.tape import Tape, TapeError, Tensor, finite_diff_check, grad


class TestGrad:
    def test_quadratic_derivative(self):
        t = Tape()
        p = t.leaf([1.0, 2.0, 3.0])
        loss = (p * p).sum()
        np.testing.assert_array_equal(grad(loss, [p])[0], [2.0, 4.0, 6.0])

    def test_linear_derivative_any_shape(self):
        t = Tape()
        p = t.leaf(np.arange(12.0).reshape(3, 4))
        loss = p.sum()
        np.testing.assert_array_equal(grad(loss, [p])[0], np.ones((3, 4)))

    def test_logistic_regression_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=2)
        y = rng.normal(size=2)

        def f(leaves):
            pred = tp.sigmoid(tp.matmul(leaves[0], x))
            err = tp.sub(pred, y)
            return tp.mean(tp.mul(err, err))

        assert finite_diff_check(f, [rng.normal(size=(2, 2))], eps=1e-6) < 1e-5

    def test_param_not_on_tape_is_an_error(self):
        t = Tape()
        p = t.leaf([1.0])
        loss = (p * p).sum()
        stray = Tensor(np.ones(3))
        with pytest.raises(TapeError):
            grad(loss, [stray])
        other = Tape().leaf([2.0])
        with pytest.raises(TapeError):
            grad(loss, [other])

    def test_non_scalar_loss_is_an_error(self):
        t = Tape()
        p = t.leaf([1.0, 2.0])
        with pytest.raises(TapeError):
            grad(p * p, [p])

    def test_unused_on_tape_param_gets_true_zero(self):
        t = Tape()
        p = t.leaf([1.0, 2.0])
        q = t.leaf([3.0])
        loss = (p * p).sum()
        np.testing.assert_array_equal(grad(loss, [q])[0], [0.0])

    def test_tape_is_rerunnable(self):
        t = Tape()
        p = t.leaf([1.0, -2.0])
        loss = (p * p * p).sum()
        g1 = grad(loss, [p])[0]
        g2 = grad(loss, [p])[0]
        np.testing.assert_array_equal(g1, g2)

    def test_backward_does_not_mutate_forward_values(self):
        t = Tape()
        p = t.leaf([0.3, -0.7])
        mid = tp.tanh(p)
        loss = (mid * mid).sum()
        before = mid.data.copy()
        grad(loss, [p])
        np.testing.assert_array_equal(mid.data, before)

    def test_identical_seeds_give_identical_gradients(self):
        def run():
            rng = np.random.default_rng(5)
            t = Tape()
            a = t.leaf(rng.normal(size=(4, 3)))
            b = t.leaf(rng.normal(size=(3, 2)))
            loss = tp.sum_(tp.tanh(tp.matmul(a, b)))
            return grad(loss, [a, b])

        for g1, g2 in zip(run(), run()):
            assert g1.tobytes() == g2.tobytes()


class TestOpGradients:
    """Every primitive op matches central finite differences (rel < 1e-4)."""

    @pytest.mark.parametrize("name", sorted(gradcheck.op_checks(seed=2).keys()))
    def test_op(self, name):
        err = gradcheck.op_checks(seed=2)[name]
        assert err < 1e-4, f"{name}: rel err {err:.3e}"


class TestFiniteDiffCheck:
    def test_square_scalar(self):
        def f(leaves):
            return tp.sum_(tp.mul(leaves[0], leaves[0]))

        assert finite_diff_check(f, [np.array([3.0])], eps=1e-6) < 1e-7

    def test_requires_positive_eps(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda ls: ls[0].sum(), [np.ones(1)], eps=0.0)

    def test_non_finite_objective_is_an_error(self):
        def f(leaves):
            return tp.sum_(tp.div(leaves[0], Tensor(np.zeros(1))))

        with pytest.raises(FloatingPointError):
            finite_diff_check(f, [np.ones(1)], eps=1e-6)


class TestAdam:
    def test_zero_grads_zero_decay_is_identity(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState(weight_decay=0.0)
        adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_first_step_hand_value(self):
        # m=0.1, v=1e-3, bias-corrected to (1, 1): update = lr = 0.1
        params = {"w": np.array([1.0])}
        state = AdamState(lr=0.1, weight_decay=0.0)
        adam_step(params, {"w": np.array([1.0])}, state)
        np.testing.assert_allclose(params["w"], [0.9], atol=1e-9)
        assert state.step == 1

    def test_determinism(self):
        def run():
            params = {"w": np.linspace(-1, 1, 5)}
            state = AdamState()
            for k in range(3):
                adam_step(params, {"w": np.full(5, 0.1 * (k + 1))}, state)
            return params["w"].tobytes()

        assert run() == run()

    def test_nan_gradient_names_the_parameter(self):
        params = {"good": np.ones(2), "bad": np.ones(2)}
        grads = {"good": np.zeros(2), "bad": np.array([np.nan, 0.0])}
        with pytest.raises(DivergenceError, match="bad"):
            adam_step(params, grads, AdamState())

    def test_moments_match_parameter_shapes(self):
        params = {"w": np.ones((2, 3))}
        state = AdamState()
        adam_step(params, {"w": np.ones((2, 3))}, state)
        assert state.m["w"].shape == (2, 3)
        assert state.v["w"].shape == (2, 3)

    def test_decoupled_weight_decay_shrinks_without_gradient(self):
        params = {"w": np.array([1.0])}
        state = AdamState(lr=0.1, weight_decay=0.5)
        adam_step(params, {"w": np.zeros(1)}, state)
        np.testing.assert_allclose(params["w"], [1.0 - 0.1 * 0.5 * 1.0])
