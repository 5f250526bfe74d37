"""Low-level numeric kernels against independent oracles.

Matrix products are checked against a naive triple loop, sigmoid against a
high-precision mpmath evaluation (values frozen below, recomputed live when
mpmath is importable), and the finite-difference estimator against a
function whose gradient is known in closed form.
"""

import numpy as np
import pytest

from emograph.errors import DimensionError, NumericError
from emograph.numerics import (ParamTensor, finite_diff_grad, group_relative_error,
                               l2_normalize, l2_normalize_backward, l2_normalize_rows,
                               matmul, matmul_backward, sigmoid, sigmoid_backward,
                               softmax)

# frozen from mpmath at 40 digits: 1/(1+exp(-2)), 1/(1+exp(1)), 1/(1+exp(-1))
SIGMOID_2 = 0.8807970779778824
SIGMOID_NEG1 = 0.2689414213699951
SIGMOID_POS1 = 0.7310585786300049
# frozen from mpmath: exp(i)/sum(exp(1..3))
SOFTMAX_123 = (0.09003057317038046, 0.24472847105479764, 0.6652409557748219)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 5))
        got = matmul(a, b)
        want = naive_matmul(a, b)
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_associativity_within_float_noise(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(6, 3))
        c = rng.normal(size=(3, 5))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.max(np.abs(left - right)) <= 1e-9

    def test_identity_is_exact(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(4, 4))
        assert np.array_equal(matmul(a, np.eye(4)), a)
        assert np.array_equal(matmul(np.eye(4), a), a)

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_non_finite_raises(self):
        a = np.array([[1.0, np.inf]])
        with pytest.raises(NumericError):
            matmul(a, np.ones((2, 1)))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        a = ParamTensor("a", rng.normal(size=(3, 4)))
        b = ParamTensor("b", rng.normal(size=(4, 2)))
        w = rng.normal(size=(3, 2))  # fixed cotangent

        def loss():
            return float(np.sum(w * matmul(a.value, b.value)))

        fd = finite_diff_grad(loss, [a, b], h=1e-6)
        da, db = matmul_backward(w, a.value, b.value)
        assert group_relative_error(da, fd["a"]) <= 1e-7
        assert group_relative_error(db, fd["b"]) <= 1e-7


class TestL2Normalize:
    def test_three_four_five_triangle(self):
        # norm of (3, 4) is exactly 5; both quotients are exact doubles
        out = l2_normalize(np.array([3.0, 4.0]))
        assert out[0] == 0.6 and out[1] == 0.8

    def test_unit_norm_after(self):
        rng = np.random.default_rng(4)
        v = rng.normal(size=7) * 10
        assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) <= 1e-12

    def test_zero_vector_stays_zero(self):
        out = l2_normalize(np.zeros(5))
        assert np.array_equal(out, np.zeros(5))

    def test_rows_match_vector_version(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(4, 6))
        rows = l2_normalize_rows(m)
        for i in range(4):
            assert np.array_equal(rows[i], l2_normalize(m[i]))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        v = ParamTensor("v", rng.normal(size=5))
        d_out = rng.normal(size=5)

        def loss():
            return float(d_out @ l2_normalize(v.value))

        fd = finite_diff_grad(loss, [v], h=1e-6)
        analytic = l2_normalize_backward(d_out, v.value)
        assert group_relative_error(analytic, fd["v"]) <= 1e-7

    def test_scale_invariance(self):
        rng = np.random.default_rng(7)
        v = rng.normal(size=6)
        assert np.max(np.abs(l2_normalize(v) - l2_normalize(3.7 * v))) <= 1e-14


class TestSigmoid:
    def test_zero_is_exactly_half(self):
        assert sigmoid(np.array(0.0)) == 0.5

    def test_agrees_with_mpmath_reference(self):
        assert abs(sigmoid(np.array(2.0)) - SIGMOID_2) <= 1e-15
        assert abs(sigmoid(np.array(-1.0)) - SIGMOID_NEG1) <= 1e-15
        assert abs(sigmoid(np.array(1.0)) - SIGMOID_POS1) <= 1e-15
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 40
        for x in (-3.5, -0.25, 0.1, 4.0):
            want = float(1 / (1 + mp.e ** (-x)))
            assert abs(sigmoid(np.array(x)) - want) <= 1e-15

    def test_symmetry(self):
        xs = np.linspace(-20, 20, 41)
        total = sigmoid(xs) + sigmoid(-xs)
        assert np.max(np.abs(total - 1.0)) <= 1e-15

    def test_extreme_inputs_do_not_overflow(self):
        lo = sigmoid(np.array(-800.0))
        hi = sigmoid(np.array(800.0))
        assert 0.0 <= lo < 1e-300
        assert hi == 1.0

    def test_backward_is_s_times_one_minus_s(self):
        rng = np.random.default_rng(8)
        x = ParamTensor("x", rng.normal(size=6))
        d_out = rng.normal(size=6)

        def loss():
            return float(d_out @ sigmoid(x.value))

        fd = finite_diff_grad(loss, [x], h=1e-6)
        s = sigmoid(x.value)
        assert group_relative_error(sigmoid_backward(d_out, s), fd["x"]) <= 1e-7


class TestSoftmax:
    def test_one_two_three_against_reference(self):
        got = softmax(np.array([1.0, 2.0, 3.0]))
        assert np.max(np.abs(got - np.array(SOFTMAX_123))) <= 1e-12

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 4.0, 2.2])
        assert np.max(np.abs(softmax(x) - softmax(x + 100.0))) <= 1e-12

    def test_uniform_on_equal_logits(self):
        got = softmax(np.zeros(8))
        assert np.array_equal(got, np.full(8, 0.125))

    def test_sums_to_one(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=12) * 5
        assert abs(softmax(x).sum() - 1.0) <= 1e-12


class TestFiniteDiff:
    def test_quadratic_has_known_gradient(self):
        theta = ParamTensor("theta", np.array([1.0, -2.0]))

        def loss():
            return float(np.sum(theta.value ** 2))

        fd = finite_diff_grad(loss, [theta], h=1e-5)
        # d/dx sum(x^2) = 2x -> (2, -4)
        assert np.max(np.abs(fd["theta"] - np.array([2.0, -4.0]))) <= 1e-9

    def test_constant_loss_gives_zero(self):
        theta = ParamTensor("theta", np.arange(4.0))
        fd = finite_diff_grad(lambda: 3.5, [theta], h=1e-5)
        assert np.array_equal(fd["theta"], np.zeros(4))

    def test_values_restored_after_probing(self):
        theta = ParamTensor("theta", np.array([0.5, 1.5]))
        before = theta.value.copy()
        finite_diff_grad(lambda: float(theta.value.sum()), [theta], h=1e-5)
        assert np.array_equal(theta.value, before)

    def test_shared_tensor_probed_once(self):
        t = ParamTensor("w", np.array([2.0]))
        calls = []

        def loss():
            calls.append(1)
            return float(t.value[0] ** 2)

        fd = finite_diff_grad(loss, [t, t], h=1e-5)
        assert len(fd) == 1
        assert len(calls) == 2  # one scalar, two probes

    def test_non_finite_loss_raises(self):
        theta = ParamTensor("theta", np.array([1.0]))
        with pytest.raises(NumericError):
            finite_diff_grad(lambda: float("nan"), [theta], h=1e-5)


class TestGroupRelativeError:
    def test_identical_is_zero(self):
        a = np.array([1.0, -2.0, 3.0])
        assert group_relative_error(a, a.copy()) == 0.0

    def test_hand_computed_case(self):
        # dyadic values keep every step exact: diff 1.0 over scale 8.0
        a = np.array([0.0, 8.0])
        b = np.array([1.0, 8.0])
        assert group_relative_error(a, b) == 0.125

    def test_tiny_scales_use_floor(self):
        a = np.array([0.0])
        b = np.array([1e-12])
        # both below the 1e-8 floor: err = 1e-12 / 1e-8 = 1e-4
        assert abs(group_relative_error(a, b) - 1e-4) <= 1e-12


class TestParamTensor:
    def test_init_uniform_respects_fan_in_bound(self):
        rng = np.random.default_rng(10)
        t = ParamTensor.init_uniform("w", (50, 40), 40, rng)
        bound = 1.0 / np.sqrt(40)
        assert np.all(np.abs(t.value) <= bound)
        assert t.value.shape == (50, 40)
        assert np.array_equal(t.grad, np.zeros((50, 40)))

    def test_accumulate_adds(self):
        t = ParamTensor("w", np.zeros((2, 2)))
        t.accumulate(np.ones((2, 2)))
        t.accumulate(np.ones((2, 2)))
        assert np.array_equal(t.grad, 2 * np.ones((2, 2)))

    def test_accumulate_shape_mismatch_raises(self):
        t = ParamTensor("w", np.zeros((2, 2)))
        with pytest.raises(DimensionError):
            t.accumulate(np.ones((3, 2)))

    def test_zero_grad_clears_everything_but_value(self):
        t = ParamTensor("w", np.ones(3))
        t.accumulate(np.ones(3))
        t.zero_grad()
        assert np.array_equal(t.grad, np.zeros(3))
        assert np.array_equal(t.value, np.ones(3))
