import math

import numpy as np
import pytest

from latindex.errors import NumericalError
from latindex.quadrature import (
    gaussian_expectation,
    hermite_rule,
    log_gaussian_expectation,
)

SQRT_PI = math.sqrt(math.pi)


def analytic_moment(k: int) -> float:
    """Closed form of the integral of x^k exp(-x^2) over the real line."""
    if k % 2 == 1:
        return 0.0
    return math.gamma((k + 1) / 2.0)


class TestHermiteRule:
    def test_order_one_is_the_midpoint_rule(self):
        rule = hermite_rule(1)
        assert rule.nodes.tolist() == [0.0]
        assert rule.weights[0] == pytest.approx(SQRT_PI, abs=1e-15)

    def test_order_two_closed_form(self):
        # Roots of 4x^2 - 2 are +/- 1/sqrt(2); both weights are sqrt(pi)/2.
        rule = hermite_rule(2)
        np.testing.assert_allclose(rule.nodes, [-1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-14)
        np.testing.assert_allclose(rule.weights, [SQRT_PI / 2, SQRT_PI / 2], atol=1e-14)

    def test_second_moment(self):
        rule = hermite_rule(5)
        val = float(rule.weights @ rule.nodes**2)
        assert val == pytest.approx(SQRT_PI / 2, rel=1e-12)

    @pytest.mark.parametrize("order", [1, 2, 3, 7, 20, 61, 200])
    def test_invariants(self, order):
        rule = hermite_rule(order)
        assert rule.nodes.shape == rule.weights.shape == (order,)
        assert np.all(np.diff(rule.nodes) > 0)
        assert np.all(rule.weights > 0)
        np.testing.assert_allclose(rule.nodes, -rule.nodes[::-1], atol=1e-12)
        np.testing.assert_allclose(rule.weights, rule.weights[::-1], atol=1e-12)
        assert float(rule.weights.sum()) == pytest.approx(SQRT_PI, abs=1e-10)

    @pytest.mark.parametrize("order", [2, 5, 12, 20])
    def test_polynomial_exactness(self, order):
        rule = hermite_rule(order)
        for k in range(2 * order):
            approx = float(rule.weights @ rule.nodes**k)
            exact = analytic_moment(k)
            if k % 2 == 1:
                # Zero target: compare against the rule's absolute mass.
                scale = float(rule.weights @ np.abs(rule.nodes) ** k)
                assert abs(approx) <= 1e-9 * max(scale, 1.0)
            else:
                assert approx == pytest.approx(exact, rel=1e-9)

    @pytest.mark.parametrize("order", [0, -3, 201])
    def test_order_out_of_range(self, order):
        with pytest.raises(ValueError):
            hermite_rule(order)

    def test_order_must_be_integer(self):
        with pytest.raises(ValueError):
            hermite_rule(2.5)


class TestGaussianExpectation:
    def test_normalization(self):
        rule = hermite_rule(31)
        assert gaussian_expectation(lambda z: np.ones_like(z), rule) == pytest.approx(1.0, abs=1e-12)

    def test_standard_normal_variance(self):
        rule = hermite_rule(2)
        assert gaussian_expectation(lambda z: z**2, rule) == pytest.approx(1.0, rel=1e-12)

    def test_odd_function_vanishes(self):
        rule = hermite_rule(40)
        assert abs(gaussian_expectation(lambda z: z, rule)) < 1e-14

    def test_scalar_only_integrand(self):
        rule = hermite_rule(21)
        val = gaussian_expectation(lambda z: float(z) ** 2 + 1.0, rule)
        assert val == pytest.approx(2.0, rel=1e-10)

    def test_bounded_by_function_range(self):
        rule = hermite_rule(61)
        z, _ = rule.standard_normal_points()
        f = lambda t: 1.0 / (1.0 + np.exp(-t))
        val = gaussian_expectation(f, rule)
        assert f(z).min() <= val <= f(z).max()

    def test_non_finite_reports_node_index(self):
        rule = hermite_rule(9)

        def bad(z):
            out = np.asarray(z, dtype=float).copy()
            out[3] = np.inf
            return out

        with pytest.raises(NumericalError) as err:
            gaussian_expectation(bad, rule)
        assert err.value.node_index == 3

    def test_doubling_order_converges(self):
        # Fixed smooth bounded integrand; order >= 40 is already settled.
        f = lambda z: np.tanh(z / 2.0) ** 2
        v40 = gaussian_expectation(f, hermite_rule(40))
        v80 = gaussian_expectation(f, hermite_rule(80))
        assert abs(v80 - v40) < 1e-8

    def test_log_space_matches_direct(self):
        rule = hermite_rule(31)
        z, _ = rule.standard_normal_points()
        logf = -0.5 * z**2
        direct = gaussian_expectation(lambda t: np.exp(-0.5 * t**2), rule)
        assert math.exp(float(log_gaussian_expectation(logf, rule))) == pytest.approx(
            direct, rel=1e-12
        )

    def test_log_space_batched(self):
        rule = hermite_rule(15)
        z, _ = rule.standard_normal_points()
        batch = np.stack([np.zeros_like(z), -0.5 * z**2])
        out = log_gaussian_expectation(batch, rule)
        assert out.shape == (2,)
        assert out[0] == pytest.approx(0.0, abs=1e-12)
