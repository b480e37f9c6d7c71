import math
from dataclasses import replace

import numpy as np
import pytest
import statsmodels.api as sm
from numpy.testing import assert_allclose
from scipy.integrate import quad
from scipy.optimize import OptimizeResult, minimize_scalar

from app.engine.family import Family
from app.engine.laplace import factorize
from app.engine.model import Dataset, GlmmSpec
from app.engine.quadrature import agh_marginal_loglik
from app.errors import (
    ConfigError,
    OuterConvergenceError,
    StandardErrorError,
    StructureError,
)
from app.models.enums import FamilyKind, Method, Parameterization
from app.models.options import FitOptions
from app.services import estimate_service
from app.services.estimate_service import (
    _beta_block,
    central_gradient,
    fit,
    fit_agh,
    fit_hl01,
    fit_hl11,
    fit_label,
    fit_mle,
    initial_params,
    maximize,
    parse_method,
    refine_random_effects,
    standard_errors,
)


def _mixedlm(spec: GlmmSpec, reml: bool):
    d = spec.dataset
    res = sm.MixedLM(d.y, d.X, groups=d.group1).fit(reml=reml)
    sigma = float(np.sqrt(np.asarray(res.cov_re)[0, 0]))
    return np.asarray(res.fe_params), sigma, float(res.scale)


class TestParseMethod:
    @pytest.mark.parametrize(
        "label,expected",
        [
            ("HL11", (Method.HL11, None)),
            ("hl01", (Method.HL01, None)),
            ("MLE", (Method.MLE, None)),
            ("AGH0", (Method.AGH0, 0)),
            ("AGH(0)", (Method.AGH0, 0)),
            ("AGH5", (Method.AGH, 5)),
            ("AGH(9)", (Method.AGH, 9)),
        ],
    )
    def test_labels(self, label, expected):
        assert parse_method(label) == expected

    @pytest.mark.parametrize("label", ["AGH", "REML", "AGH-1", ""])
    def test_unknown(self, label):
        with pytest.raises(ConfigError):
            parse_method(label)


def test_central_gradient_one_sided_at_edge():
    def f(x):
        return -np.inf if x[0] < 0 else float(x[0] ** 2)

    g = central_gradient(f, np.array([0.0]), 1e-3)
    assert g[0] == pytest.approx(1e-3)


def test_initial_params_from_glm(poisson_single):
    params = initial_params(poisson_single)
    d = poisson_single.dataset
    glm = sm.GLM(d.y, d.X, family=sm.families.Poisson()).fit()
    np.testing.assert_allclose(params.beta, glm.params, rtol=1e-8)
    np.testing.assert_array_equal(params.log_sd, [0.0])


class TestGaussianAgainstMixedLM:
    def test_hl11_matches_reml(self, gaussian_spec):
        res = fit_hl11(gaussian_spec)
        beta, sigma, scale = _mixedlm(gaussian_spec, reml=True)
        np.testing.assert_allclose(res.beta, beta, rtol=1e-3, atol=1e-3)
        assert res.sigma[0] == pytest.approx(sigma, abs=5e-3)
        assert res.phi == pytest.approx(scale, rel=5e-3)

    def test_mle_matches_ml(self, gaussian_spec):
        res = fit_mle(gaussian_spec)
        beta, sigma, scale = _mixedlm(gaussian_spec, reml=False)
        np.testing.assert_allclose(res.beta, beta, rtol=1e-3, atol=1e-3)
        assert res.sigma[0] == pytest.approx(sigma, abs=5e-3)
        assert res.phi == pytest.approx(scale, rel=5e-3)


class TestPoissonFits:
    def test_hl11_result_shape(self, poisson_rich):
        res = fit_hl11(poisson_rich)
        assert res.method == "HL11"
        assert res.levels == [5]
        assert len(res.beta) == 1
        assert all(se is not None and se > 0 for se in res.se_beta)
        assert res.sigma[0] > 0
        assert [s.stage for s in res.diagnostics] == ["stage1", "stage2"]
        assert res.phi is None
        assert len(res.u) == 1 and len(res.u[0]) == 5
        assert res.timings.total >= res.timings.stage1

    def test_hl01_single_stage(self, poisson_single):
        res = fit_hl01(poisson_single)
        assert [s.stage for s in res.diagnostics] == ["stage1"]
        assert res.beta_cov is not None

    def test_hl11_and_hl01_share_variance_stage(self, poisson_single):
        a = fit_hl11(poisson_single, FitOptions(compute_se=False))
        b = fit_hl01(poisson_single, FitOptions(compute_se=False))
        assert a.sigma[0] == pytest.approx(b.sigma[0], rel=1e-10)
        assert a.objective["stage1"] == pytest.approx(b.objective["stage1"])

    def test_one_node_agh_is_mle(self, poisson_rich):
        opts = FitOptions(compute_se=False)
        agh = fit_agh(poisson_rich, 1, opts)
        mle = fit_mle(poisson_rich, opts)
        assert agh.method == "AGH(1)"
        assert agh.objective["stage1"] == pytest.approx(
            mle.objective["stage1"], abs=1e-6
        )
        np.testing.assert_allclose(agh.beta, mle.beta, rtol=0, atol=1e-6)
        np.testing.assert_allclose(agh.sigma, mle.sigma, rtol=0, atol=1e-6)

    def test_higher_order_agh(self, bernoulli_single):
        res = fit_label(bernoulli_single, "AGH(5)")
        assert res.method_kind is Method.AGH
        assert res.agh_order == 5
        assert np.isfinite(res.objective["stage1"])

    def test_zero_order(self, poisson_single):
        res = fit(poisson_single, Method.AGH0)
        assert res.method == "AGH0"
        assert res.agh_order == 0
        assert res.se_beta[0] is not None

    def test_refined_random_effects(self, poisson_single):
        opts = FitOptions(compute_se=False, refine_random_effects=True)
        res = fit_hl11(poisson_single, opts)
        assert res.u_refined

    def test_no_standard_errors(self, poisson_single):
        res = fit_mle(poisson_single, FitOptions(compute_se=False))
        assert res.se_beta == [None, None]
        assert res.se_sigma == [None]
        assert res.beta_cov is None


class TestCrossed:
    def test_hl11(self, poisson_crossed_tiny):
        res = fit_hl11(poisson_crossed_tiny, FitOptions(compute_se=False))
        assert res.levels == [3, 2]
        assert len(res.sigma) == 2
        assert len(res.u) == 2

    def test_agh_one_node_allowed(self, poisson_crossed_tiny):
        res = fit_agh(poisson_crossed_tiny, 1, FitOptions(compute_se=False))
        assert res.method == "AGH(1)"

    def test_agh_many_nodes_rejected(self, poisson_crossed_tiny):
        with pytest.raises(StructureError):
            fit_agh(poisson_crossed_tiny, 5)


def test_agh_needs_order(poisson_single):
    with pytest.raises(ConfigError):
        fit(poisson_single, Method.AGH)
    with pytest.raises(ConfigError):
        fit_agh(poisson_single, -1)


def test_variance_on_the_boundary():
    # every group has the same responses: no between-group variation
    pattern = np.array([0.3, -0.2, 1.1, 0.4, -0.6])
    n_groups = 8
    y = np.tile(pattern, n_groups)
    n = y.size
    spec = GlmmSpec(
        Family(FamilyKind.GAUSSIAN),
        Dataset(
            y=y,
            offset=np.zeros(n),
            X=np.ones((n, 1)),
            group1=np.repeat(np.arange(n_groups), pattern.size),
            q1=n_groups,
        ),
    )
    opts = FitOptions(parameterization=Parameterization.RAW_SD)
    res = fit_mle(spec, opts)
    assert res.sigma_boundary == [True]
    assert res.sigma == [0.0]
    assert res.se_sigma == [None]
    assert res.u[0] == [0.0] * n_groups
    assert res.beta[0] == pytest.approx(pattern.mean(), abs=1e-4)


def _oracle(spec: GlmmSpec, beta: float, sigma: float) -> float:
    return agh_marginal_loglik(spec, [beta], sigma, 51)


def _oracle_restricted(spec: GlmmSpec, sigma: float) -> float:
    """log ∫ exp(oracle log-likelihood) dβ, the exact counterpart of REML."""
    b_hat = minimize_scalar(lambda b: -_oracle(spec, b, sigma)).x
    peak = _oracle(spec, b_hat, sigma)
    value, _ = quad(
        lambda b: math.exp(_oracle(spec, b, sigma) - peak),
        b_hat - 4.0,
        b_hat + 4.0,
        epsabs=0.0,
        epsrel=1e-10,
    )
    return peak + math.log(value)


class TestOuterOptimizer:
    def test_shallow_objective_runs_to_gradient_tolerance(self):
        # the first steps change f by far less than outer_ftol
        def f(x):
            return -1.5e-6 * float((x[0] - 10.0) ** 2)

        opts = FitOptions()
        res = maximize(f, np.array([0.0]), opts, "shallow")
        assert res.converged
        assert res.grad_norm <= opts.outer_gtol
        assert res.x[0] == pytest.approx(10.0, abs=1e-3)

    def test_iteration_cap(self):
        def f(x):
            return -float(100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2)

        opts = FitOptions(outer_max_iter=1)
        with pytest.raises(OuterConvergenceError) as exc:
            maximize(f, np.array([-1.2, 1.0]), opts, "rosenbrock")
        assert exc.value.diagnostics["iterations"] == 1

    @pytest.fixture
    def stopped_at(self, monkeypatch):
        """Make the optimizer give up with a failed line search at x."""

        def install(x: float):
            def fake_minimize(fun, x0, **kwargs):
                z = np.array([x])
                return OptimizeResult(
                    x=z,
                    fun=fun(z),
                    status=2,
                    success=False,
                    nit=4,
                    message="precision loss",
                )

            monkeypatch.setattr(estimate_service, "minimize", fake_minimize)

        return install

    @staticmethod
    def _bowl(x):
        return -float((x[0] - 1.0) ** 2)

    def test_failed_line_search_at_optimum_is_converged(self, stopped_at):
        stopped_at(1.0)
        res = maximize(self._bowl, np.array([0.0]), FitOptions(), "bowl")
        assert res.converged

    def test_failed_line_search_near_optimum_is_not_converged(
        self, stopped_at
    ):
        stopped_at(1.001)
        res = maximize(self._bowl, np.array([0.0]), FitOptions(), "bowl")
        assert not res.converged
        assert res.grad_norm == pytest.approx(2e-3, rel=1e-6)

    def test_failed_line_search_far_from_optimum_raises(self, stopped_at):
        stopped_at(3.0)
        with pytest.raises(OuterConvergenceError):
            maximize(self._bowl, np.array([0.0]), FitOptions(), "bowl")

    def test_fit_diagnostics_record_convergence(self, poisson_rich):
        res = fit_hl11(poisson_rich, FitOptions(compute_se=False))
        for stage in res.diagnostics:
            assert stage.converged
            assert stage.grad_norm <= FitOptions().outer_gtol


class TestStandardErrors:
    def test_quadratic(self):
        cov = np.array([[0.5, 0.1], [0.1, 0.2]])
        prec = np.linalg.inv(cov)
        a = np.array([0.3, -1.0])

        def f(x):
            d = x - a
            return -0.5 * float(d @ prec @ d)

        got = standard_errors(f, a, [1e-4, 1e-5])
        assert_allclose(got, cov, rtol=1e-6)
        assert_allclose(np.sqrt(np.diag(got)), np.sqrt([0.5, 0.2]), rtol=1e-6)

    def test_flat_objective_rejected(self):
        with pytest.raises(StandardErrorError):
            standard_errors(lambda x: float(x[0] ** 2), np.zeros(1), 1e-4)

    def test_poisson_against_oracle_curvature(self, poisson_rich):
        res = fit_mle(poisson_rich)
        x = np.array([res.beta[0], math.log(res.sigma[0])])
        cov = standard_errors(
            lambda z: _oracle(poisson_rich, z[0], math.exp(z[1])),
            x,
            [1e-5, 1e-4],
        )
        se_beta = math.sqrt(cov[0, 0])
        se_sigma = res.sigma[0] * math.sqrt(cov[1, 1])
        assert res.se_beta[0] == pytest.approx(se_beta, rel=0.05)
        assert res.se_sigma[0] == pytest.approx(se_sigma, rel=0.05)


class TestAgainstQuadratureOracle:
    def test_hl11_matches_oracle_maximizer(self, poisson_rich):
        res = fit_hl11(poisson_rich, FitOptions(compute_se=False))
        best = minimize_scalar(
            lambda t: -_oracle_restricted(poisson_rich, math.exp(t)),
            bounds=(math.log(0.05), math.log(5.0)),
            method="bounded",
            options={"xatol": 1e-7},
        )
        assert res.sigma[0] == pytest.approx(math.exp(best.x), abs=1e-3)
        beta = minimize_scalar(
            lambda b: -_oracle(poisson_rich, b, res.sigma[0])
        ).x
        assert res.beta[0] == pytest.approx(beta, abs=1e-3)

    def test_agh_orders_agree(self, poisson_rich):
        opts = FitOptions(compute_se=False)
        sigma = {
            m: fit_agh(poisson_rich, m, opts).sigma[0] for m in (5, 9, 51)
        }
        assert sigma[5] > 0.05
        assert sigma[5] == pytest.approx(sigma[9], rel=1e-3)
        assert sigma[9] == pytest.approx(sigma[51], abs=1e-3)


class TestParameterizations:
    def test_log_and_raw_sd_agree(self, poisson_rich):
        log_sd = fit_mle(poisson_rich, FitOptions(compute_se=False))
        raw_sd = fit_mle(
            poisson_rich,
            FitOptions(
                compute_se=False, parameterization=Parameterization.RAW_SD
            ),
        )
        assert log_sd.sigma[0] > 0.05
        assert raw_sd.sigma[0] == pytest.approx(log_sd.sigma[0], abs=1e-4)
        assert_allclose(raw_sd.beta, log_sd.beta, atol=1e-4)

    def test_ml_variance_below_reml(self, gaussian_spec):
        opts = FitOptions(compute_se=False)
        ml = fit_mle(gaussian_spec, opts)
        reml = fit_hl11(gaussian_spec, opts)
        assert 0.0 < ml.sigma[0] <= reml.sigma[0]


class TestRefineRandomEffects:
    def test_gaussian_closed_form(self, gaussian_spec):
        res = fit_hl11(gaussian_spec, FitOptions(compute_se=False))
        refined = refine_random_effects(gaussian_spec, res)
        d = gaussian_spec.dataset
        s2 = res.sigma[0] ** 2
        resid = d.y - d.X @ np.array(res.beta) - d.offset
        n_g = np.bincount(d.group1, minlength=d.q1)
        sums = np.bincount(d.group1, weights=resid, minlength=d.q1)
        blup = s2 * sums / (res.phi + n_g * s2)
        assert refined.u_refined
        assert_allclose(refined.u[0], blup, atol=1e-8)
        assert_allclose(refined.u[0], res.u[0], atol=1e-8)

    def test_group_without_data_stays_at_prior_mode(self, poisson_rich):
        spec = GlmmSpec(
            poisson_rich.family, replace(poisson_rich.dataset, q1=6)
        )
        res = fit_hl11(spec, FitOptions(compute_se=False))
        refined = refine_random_effects(spec, res)
        assert refined.u[0][5] == 0.0
        assert res.u[0][5] == 0.0

    def test_poisson_close_to_stage_two(self, poisson_rich):
        res = fit_hl11(poisson_rich, FitOptions(compute_se=False))
        refined = refine_random_effects(poisson_rich, res)
        assert np.corrcoef(res.u[0], refined.u[0])[0, 1] > 0.999
        assert_allclose(refined.u[0], res.u[0], atol=1e-3)


def test_fit_is_reproducible(poisson_rich):
    a = fit_hl11(poisson_rich).model_dump(exclude={"timings"})
    b = fit_hl11(poisson_rich).model_dump(exclude={"timings"})
    assert a == b


class TestNoFixedEffects:
    def test_beta_block_of_empty_design(self):
        factor = factorize(np.ones(2), None, 2.0 * np.eye(3))
        assert factor.trailing_inverse().shape == (3, 3)
        assert _beta_block(factor, 0).shape == (0, 0)
        assert_allclose(_beta_block(factor, 1), [[0.5]])

    def test_hl01_without_covariates(self, poisson_rich):
        d = poisson_rich.dataset
        spec = GlmmSpec(
            poisson_rich.family,
            replace(d, X=d.X[:, :0], offset=np.full(d.n_obs, 4.0)),
        )
        res = fit_hl01(spec)
        assert res.beta == []
        assert res.se_beta == []
        assert res.beta_cov == []
