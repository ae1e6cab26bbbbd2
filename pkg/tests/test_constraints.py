import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from paramdefense.constraints import (
    INF,
    ConstraintSet,
    beta_p,
    constrained_argmax,
    dual_exponent,
    g_exponent,
    lp_norm,
    parse_norm,
    project,
    step_update,
    top_n,
)
from paramdefense.errors import DegenerateGradientError, RejectedInputError, UnsupportedNormError

vectors = arrays(np.float64, st.integers(1, 8), elements=st.floats(-10, 10, allow_nan=False, allow_subnormal=False))
norms = st.sampled_from([1.0, 1.5, 2.0, 3.0, INF])


class TestNorms:
    def test_parse(self):
        assert parse_norm("inf") == INF
        assert parse_norm(" Inf ") == INF
        assert parse_norm("2") == 2.0
        with pytest.raises(RejectedInputError):
            parse_norm(0.5)

    def test_lp_norm_values(self):
        v = [3.0, -4.0]
        assert lp_norm(v, 1) == 7.0
        assert lp_norm(v, 2) == 5.0
        assert lp_norm(v, INF) == 4.0
        assert lp_norm(v, 3) == pytest.approx((27 + 64) ** (1 / 3))

    def test_dual(self):
        assert dual_exponent(2) == 2
        assert dual_exponent(INF) == 1
        assert dual_exponent(1) == INF
        assert dual_exponent(3) == pytest.approx(1.5)


class TestConstraintSet:
    def test_validation(self):
        with pytest.raises(RejectedInputError):
            ConstraintSet(2, -0.1)
        with pytest.raises(RejectedInputError):
            ConstraintSet(2, 1.0, n=0)

    def test_contains(self):
        S = ConstraintSet(2, 1.0, n=1)
        assert S.contains([0.0, 1.0])
        assert not S.contains([0.1, 0.1])
        assert not S.contains([0.0, 1.1])


class TestTopN:
    def test_keeps_largest_magnitudes(self):
        np.testing.assert_array_equal(top_n([1.0, -5.0, 3.0, 0.5], 2), [0.0, -5.0, 3.0, 0.0])

    def test_ties_go_to_lowest_index(self):
        np.testing.assert_array_equal(top_n([2.0, -2.0, 2.0], 2), [2.0, -2.0, 0.0])

    def test_n_equal_k_is_identity(self):
        np.testing.assert_array_equal(top_n([1.0, 2.0], 2), [1.0, 2.0])

    def test_n_out_of_range(self):
        with pytest.raises(RejectedInputError):
            top_n([1.0, 2.0], 3)
        with pytest.raises(RejectedInputError):
            ConstraintSet(2, 1.0, n=3).support(2)


class TestArgmax:
    def test_l2(self):
        a, val = constrained_argmax([3.0, 4.0], ConstraintSet(2, 0.5))
        np.testing.assert_allclose(a, [0.3, 0.4])
        assert val == pytest.approx(2.5)

    def test_linf_is_signed_box_corner(self):
        a, val = constrained_argmax([3.0, -4.0, 0.0], ConstraintSet(INF, 0.1))
        np.testing.assert_array_equal(a, [0.1, -0.1, 0.0])
        assert val == pytest.approx(0.7)

    def test_l1_puts_all_mass_on_largest(self):
        a, val = constrained_argmax([1.0, -4.0, 2.0], ConstraintSet(1, 0.2))
        np.testing.assert_array_equal(a, [0.0, -0.2, 0.0])
        assert val == pytest.approx(0.8)

    def test_sparse_l2(self):
        a, val = constrained_argmax([1.0, -4.0, 3.0], ConstraintSet(2, 1.0, n=2))
        np.testing.assert_allclose(a, [0.0, -0.8, 0.6])
        assert val == pytest.approx(5.0)

    def test_zero_radius(self):
        a, val = constrained_argmax([1.0, 2.0], ConstraintSet(2, 0.0))
        np.testing.assert_array_equal(a, 0.0)
        assert val == 0.0

    def test_zero_gradient_is_degenerate(self):
        with pytest.raises(DegenerateGradientError):
            constrained_argmax([0.0, 0.0], ConstraintSet(2, 1.0))

    @settings(max_examples=200, deadline=None)
    @given(vectors, norms, st.floats(0.01, 5), st.integers(1, 8))
    def test_attains_dual_norm_and_is_feasible(self, v, p, eps, n):
        S = ConstraintSet(p, eps, min(n, v.size))
        h = top_n(v, S.support(v.size))
        if not np.any(h):
            return
        a, val = constrained_argmax(v, S)
        assert lp_norm(a, p) <= eps * (1 + 1e-12)
        assert np.count_nonzero(a) <= S.support(v.size)
        assert a @ v == pytest.approx(val, rel=1e-9, abs=1e-12)
        assert val == pytest.approx(eps * lp_norm(h, dual_exponent(p)), rel=1e-12)

    def test_general_p_against_numerical_optimizer(self):
        # independent route: maximize a.v over the p-sphere with scipy
        from scipy.optimize import minimize

        v = np.array([0.3, -1.2, 0.7])
        p, eps = 3.0, 0.5
        a, val = constrained_argmax(v, ConstraintSet(p, eps))
        cons = {"type": "eq", "fun": lambda x: lp_norm(x, p) - eps}
        res = minimize(lambda x: -x @ v, np.full(3, 0.1), constraints=[cons], method="SLSQP", tol=1e-12)
        assert val == pytest.approx(-res.fun, rel=1e-6)
        np.testing.assert_allclose(a, res.x, atol=1e-5)


class TestStep:
    def test_lengths(self):
        g = np.array([1.0, -2.0, 0.5])
        assert lp_norm(step_update(g, 0.3, 2), 2) == pytest.approx(0.3)
        np.testing.assert_array_equal(step_update(g, 0.3, INF), [0.3, -0.3, 0.3])

    def test_zero_gradient(self):
        with pytest.raises(DegenerateGradientError):
            step_update(np.zeros(3), 0.1, 2)

    def test_bad_alpha(self):
        with pytest.raises(RejectedInputError):
            step_update(np.ones(2), 0.0, 2)


class TestProject:
    def test_linf_clips(self):
        np.testing.assert_array_equal(project([0.5, -2.0, 0.05], ConstraintSet(INF, 0.1)), [0.1, -0.1, 0.05])

    def test_l2_scales(self):
        np.testing.assert_allclose(project([3.0, 4.0], ConstraintSet(2, 1.0)), [0.6, 0.8])

    def test_inside_unchanged(self):
        x = np.array([0.1, 0.2])
        np.testing.assert_array_equal(project(x, ConstraintSet(2, 1.0)), x)

    def test_sparse(self):
        np.testing.assert_allclose(project([3.0, 0.1, -4.0], ConstraintSet(2, 1.0, n=2)), [0.6, 0.0, -0.8])

    def test_unsupported_norm(self):
        with pytest.raises(UnsupportedNormError):
            project([1.0], ConstraintSet(3, 1.0))

    @settings(max_examples=300, deadline=None)
    @given(vectors, st.sampled_from([2.0, INF]), st.floats(1e-3, 5), st.integers(1, 8))
    def test_feasible_and_idempotent(self, x, p, eps, n):
        S = ConstraintSet(p, eps, min(n, x.size))
        y = project(x, S)
        assert lp_norm(y, p) <= eps
        assert np.count_nonzero(y) <= S.support(x.size)
        np.testing.assert_array_equal(project(y, S), y)

    @pytest.mark.parametrize("p", [2.0, INF])
    def test_beats_grid_oracle_in_2d(self, p):
        rng = np.random.default_rng(0)
        S = ConstraintSet(p, 0.7)
        g = np.linspace(-0.7, 0.7, 281)
        grid = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
        norms_ = np.max(np.abs(grid), 1) if math.isinf(p) else np.linalg.norm(grid, axis=1)
        grid = grid[norms_ <= 0.7 + 1e-12]
        for _ in range(20):
            x = rng.uniform(-2, 2, 2)
            y = project(x, S)
            best = np.min(np.linalg.norm(grid - x, axis=1))
            assert np.linalg.norm(y - x) <= best + 1e-6


class TestConstants:
    def test_beta_p(self):
        assert beta_p(2, 10) == 1.0
        assert beta_p(INF, 4, "l2_le_lr") == pytest.approx(2.0)
        assert beta_p(1.5, 8) == pytest.approx(8 ** (1 / 1.5 - 0.5))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 6, elements=st.floats(-5, 5, allow_subnormal=False)), st.sampled_from([1.5, 2.0, 4.0, INF]))
    def test_beta_p_inequality(self, x, p):
        assert lp_norm(x, p) <= beta_p(p, 6) * lp_norm(x, 2) * (1 + 1e-12) + 1e-300

    def test_g_exponent(self):
        assert g_exponent(2) == pytest.approx(-0.5)
        assert g_exponent(INF) == 0.5
        assert g_exponent(8) == pytest.approx(0.25)
