import math
import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad, trapezoid
from scipy.optimize import minimize_scalar
from scipy.special import gammaln

from app.engine.laplace import laplace_marginal_loglik
from app.engine.model import ParamState
from app.engine.quadrature import (
    MAX_ORDER,
    _group_modes,
    _single_factor_data,
    agh_group_logintegral,
    agh_marginal_loglik,
    gh_nodes,
    oracle_marginal_loglik,
    tensor_marginal_loglik,
)
from app.errors import ConfigError, QuadratureError, StructureError
from app.models.enums import FamilyKind
from tests.conftest import make_spec

BETA = np.array([-0.5, 0.3])


def _brute_force_group(y, eta0, sigma) -> float:
    """log ∫ exp(h_g) du for one Poisson group by adaptive quadrature."""

    def h(u):
        eta = eta0 + u
        return (
            float(np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0)))
            - 0.5 * (u / sigma) ** 2
            - math.log(sigma)
            - 0.5 * math.log(2 * math.pi)
        )

    mode = minimize_scalar(lambda u: -h(u)).x
    peak = h(mode)
    value, _ = quad(
        lambda u: math.exp(h(u) - peak),
        mode - 12.0,
        mode + 12.0,
        epsabs=0.0,
        epsrel=1e-12,
        limit=200,
    )
    return peak + math.log(value)


def _brute_force_marginal(spec, beta, sigma) -> float:
    d = spec.dataset
    eta0 = d.X @ beta + d.offset
    return sum(
        _brute_force_group(d.y[d.group1 == g], eta0[d.group1 == g], sigma)
        for g in range(d.q1)
    )


def _laplace(spec, beta, sigma, phi=1.0) -> float:
    params = ParamState.initial(spec, beta)
    params.log_sd = np.log(np.atleast_1d(sigma))
    params.phi = phi
    return laplace_marginal_loglik(spec, params)


class TestGaussHermiteRule:
    @pytest.mark.parametrize("m", [1, 2, 5, 9, 20, 51])
    def test_moments(self, m):
        rule = gh_nodes(m)
        assert rule.nodes.size == m
        assert rule.weights.sum() == pytest.approx(math.sqrt(math.pi))
        assert_allclose(rule.nodes, -rule.nodes[::-1], atol=0)
        if m >= 2:
            second = float(rule.weights @ rule.nodes**2)
            assert second == pytest.approx(math.sqrt(math.pi) / 2)

    def test_cached(self):
        assert gh_nodes(7) is gh_nodes(7)

    def test_nodes_read_only(self):
        with pytest.raises(ValueError):
            gh_nodes(3).nodes[0] = 1.0

    @pytest.mark.parametrize("m", [0, -1, MAX_ORDER + 1])
    def test_order_out_of_range(self, m):
        with pytest.raises(ConfigError):
            gh_nodes(m)


class TestSingleFactorAgh:
    def test_one_node_equals_laplace(self, poisson_single):
        agh = agh_marginal_loglik(poisson_single, BETA, 0.8, 1)
        la = _laplace(poisson_single, BETA, 0.8)
        assert agh == pytest.approx(la, abs=1e-8)

    def test_one_node_equals_laplace_binary(self, bernoulli_single):
        beta = np.array([0.2])
        agh = agh_marginal_loglik(bernoulli_single, beta, 1.2, 1)
        la = _laplace(bernoulli_single, beta, 1.2)
        assert agh == pytest.approx(la, abs=1e-8)

    def test_higher_orders_converge(self, poisson_single):
        brute = _brute_force_marginal(poisson_single, BETA, 0.8)
        errors = {
            m: abs(agh_marginal_loglik(poisson_single, BETA, 0.8, m) - brute)
            for m in (1, 9, 25, 51, MAX_ORDER)
        }
        assert errors[9] < 1e-4
        assert errors[25] < 1e-8
        assert errors[51] < 1e-9
        assert errors[MAX_ORDER] < 1e-9
        assert errors[51] <= errors[9] <= errors[1]

    def test_two_observation_group(self):
        y = np.array([1.0, 0.0])
        eta0 = np.full(2, -1.0)
        a25 = agh_group_logintegral(FamilyKind.POISSON, y, eta0, 1.0, 25)
        a51 = agh_group_logintegral(FamilyKind.POISSON, y, eta0, 1.0, 51)
        assert abs(a25 - a51) <= 1e-10
        brute = _brute_force_group(y, eta0, 1.0)
        assert a51 == pytest.approx(brute, abs=1e-8)

    def test_highest_order_has_no_warnings(self):
        gh_nodes.cache.clear()
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            rule = gh_nodes(MAX_ORDER)
        assert rule.weights.sum() == pytest.approx(math.sqrt(math.pi))
        assert not np.isnan(rule.log_weights).any()

    def test_mode_search_keeps_iterate_without_ascent(self, poisson_single):
        gd = _single_factor_data(poisson_single)
        d = poisson_single.dataset
        eta0 = d.X @ BETA + d.offset
        exact_h, exact_derivatives = gd.h_groups, gd.derivatives
        first_group = []

        def h_pinned(eta0, u, sigma, phi):
            # any move of group 0 away from 0 is a loss
            out = exact_h(eta0, u, sigma, phi)
            out[0] -= 1e3 * (u[0] != 0.0)
            return out

        def derivatives(eta0, u, sigma, phi):
            first_group.append(u[0])
            return exact_derivatives(eta0, u, sigma, phi)

        gd.h_groups, gd.derivatives = h_pinned, derivatives
        with pytest.raises(QuadratureError):
            _group_modes(gd, eta0, 0.8, 1.0)
        assert first_group and set(first_group) == {0.0}

    def test_gaussian_exact_at_any_order(self):
        rng = np.random.default_rng(4)
        y = rng.normal(0.5, 1.0, 7)
        eta0 = np.full(7, 0.2)
        one = agh_group_logintegral(FamilyKind.GAUSSIAN, y, eta0, 0.9, 1, 0.7)
        many = agh_group_logintegral(
            FamilyKind.GAUSSIAN, y, eta0, 0.9, 11, 0.7
        )
        assert one == pytest.approx(many, abs=1e-10)

    def test_group_integral_matches_brute_force(self):
        y = np.array([0.0, 2.0, 1.0])
        eta0 = np.array([0.1, -0.2, 0.3])
        sigma = 0.7
        grid = np.linspace(-8.0, 8.0, 40001)
        eta = eta0[:, None] + grid[None, :]
        h = (
            (y[:, None] * eta - np.exp(eta)).sum(axis=0)
            - np.log([1.0, 2.0, 1.0]).sum()
            - 0.5 * (grid / sigma) ** 2
            - math.log(sigma)
            - 0.5 * math.log(2 * math.pi)
        )
        brute = math.log(trapezoid(np.exp(h), grid))
        agh = agh_group_logintegral(FamilyKind.POISSON, y, eta0, sigma, 21)
        assert agh == pytest.approx(brute, abs=1e-7)


class TestTensorOracle:
    def test_one_node_equals_laplace(self, poisson_crossed_tiny):
        sigma = [0.8, 0.5]
        grid = tensor_marginal_loglik(poisson_crossed_tiny, BETA, sigma, 1)
        la = _laplace(poisson_crossed_tiny, BETA, sigma)
        assert grid == pytest.approx(la, abs=1e-8)

    def test_close_to_laplace(self, poisson_crossed_tiny):
        sigma = [0.8, 0.5]
        oracle = oracle_marginal_loglik(poisson_crossed_tiny, BETA, sigma, 9)
        la = _laplace(poisson_crossed_tiny, BETA, sigma)
        assert abs(oracle - la) / abs(oracle) < 0.01

    def test_reduces_to_product_rule_for_one_factor(self, poisson_single):
        grid = tensor_marginal_loglik(poisson_single, BETA, [0.8], 7)
        product = agh_marginal_loglik(poisson_single, BETA, 0.8, 7)
        assert grid == pytest.approx(product, abs=1e-8)

    def test_too_many_effects(self):
        spec = make_spec(FamilyKind.POISSON, n=30, q1=6, q2=3)
        with pytest.raises(StructureError):
            tensor_marginal_loglik(spec, BETA, [0.8, 0.5], 3)
