"""
Estimation workflows on top of the Laplace and quadrature engines.

    HL11  stage 1: maximize p_{β,u}(h) over the variance parameters;
          stage 2: fix them, maximize p_u(h) over β.
    HL01  stage 1 only; β and u from the final joint inner optimum.
    MLE   maximize p_u(h) jointly over β and the variance parameters.
    AGH   maximize the AGH-m marginal (single factor); m=0 is AGH0.

Outer problems use BFGS with central-difference gradients. Standard
errors come from central second differences of the outer objective.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import statsmodels.api as sm
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize
from statsmodels.tools.sm_exceptions import PerfectSeparationError

from app.engine.laplace import LaplaceObjective, profile_value
from app.engine.model import GlmmSpec, ParamState, h_loglik
from app.engine.quadrature import AghObjective, ZeroOrderObjective
from app.errors import (
    ConfigError,
    NumericalError,
    OuterConvergenceError,
    StandardErrorError,
    StructureError,
)
from app.models.enums import (
    FactorStructure,
    FamilyKind,
    Method,
    Parameterization,
)
from app.models.fit import FitResult, StageDiagnostics, StageTimings
from app.models.options import FitOptions
from app.utils.timing import stopwatch

log = logging.getLogger(__name__)

_RAW_SD_FLOOR = 1e-8
_USABLE_GRAD = 1e-2


# ── Outer optimization ───────────────────────────────────────────────────────


@dataclass
class OuterResult:
    x: np.ndarray
    value: float
    iterations: int
    evaluations: int
    grad_norm: float
    converged: bool
    message: str


def central_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, step
) -> np.ndarray:
    """Central differences; one-sided where a side is infeasible."""
    x = np.asarray(x, dtype=np.float64)
    steps = np.broadcast_to(np.asarray(step, dtype=np.float64), x.shape)
    f0 = None
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = steps[j]
        fp, fm = f(x + e), f(x - e)
        if np.isfinite(fp) and np.isfinite(fm):
            g[j] = (fp - fm) / (2.0 * steps[j])
            continue
        if f0 is None:
            f0 = f(x)
        if np.isfinite(fp) and np.isfinite(f0):
            g[j] = (fp - f0) / steps[j]
        elif np.isfinite(fm) and np.isfinite(f0):
            g[j] = (f0 - fm) / steps[j]
    return g


def _projected_norm(grad: np.ndarray, x: np.ndarray, bounds) -> float:
    """∞-norm of the minimization gradient, ignoring active lower bounds."""
    g = np.array(grad, dtype=np.float64)
    if bounds:
        for j, (lo, _) in enumerate(bounds):
            if lo is not None and x[j] <= lo and g[j] > 0.0:
                g[j] = 0.0
    return float(np.max(np.abs(g))) if g.size else 0.0


def maximize(
    f: Callable[[np.ndarray], float],
    x0: np.ndarray,
    options: FitOptions,
    label: str,
    bounds: Optional[list[tuple[Optional[float], Optional[float]]]] = None,
) -> OuterResult:
    """Quasi-Newton maximization of f; f returns -inf where undefined.

    Converged means |Δf| <= outer_ftol between iterates and the gradient
    ∞-norm <= outer_gtol, both at the final iterate. The optimizer's own
    stopping rules are disabled so that only this test ends a run.
    """
    counter = {"n": 0}
    last_grad: dict = {"x": None, "g": None}

    def neg(z: np.ndarray) -> float:
        counter["n"] += 1
        v = f(z)
        return -v if np.isfinite(v) else math.inf

    def neg_grad(z: np.ndarray) -> np.ndarray:
        g = -central_gradient(f, z, options.outer_grad_step)
        last_grad["x"], last_grad["g"] = np.array(z, dtype=np.float64), g
        return g

    def grad_at(z: np.ndarray) -> np.ndarray:
        if last_grad["x"] is not None and np.array_equal(last_grad["x"], z):
            return last_grad["g"]
        return neg_grad(z)

    x0 = np.asarray(x0, dtype=np.float64)
    f0 = f(x0)
    if not np.isfinite(f0):
        raise OuterConvergenceError(
            f"{label}: objective undefined at the starting point",
            {"x0": x0.tolist()},
        )
    state = {"fun": -f0, "delta": math.inf, "grad_norm": math.inf}

    def callback(intermediate_result) -> None:
        x = np.asarray(intermediate_result.x, dtype=np.float64)
        fun = float(intermediate_result.fun)
        state["delta"] = abs(state["fun"] - fun)
        state["fun"] = fun
        state["grad_norm"] = _projected_norm(grad_at(x), x, bounds)
        log.debug(
            "%s: f=%.10g |df|=%.2e |g|=%.2e x=%s",
            label,
            -fun,
            state["delta"],
            state["grad_norm"],
            x,
        )
        if (
            state["delta"] <= options.outer_ftol
            and state["grad_norm"] <= options.outer_gtol
        ):
            raise StopIteration

    if bounds:
        method = "L-BFGS-B"
        inner_opts = {"maxiter": options.outer_max_iter, "ftol": 0.0}
    else:
        method = "BFGS"
        inner_opts = {"maxiter": options.outer_max_iter}
    res = minimize(
        neg,
        x0,
        jac=neg_grad,
        method=method,
        bounds=bounds,
        callback=callback,
        options={**inner_opts, "gtol": 0.0},
    )
    x = np.asarray(res.x, dtype=np.float64)
    grad_norm = _projected_norm(grad_at(x), x, bounds)
    nit = int(getattr(res, "nit", 0))
    diagnostics = {
        "stage": label,
        "iterations": nit,
        "grad_norm": grad_norm,
        "delta": state["delta"],
        "message": str(res.message),
    }
    # status 0 or 2: zero gradient or no ascent found, so the final step is 0
    converged = res.status == 99 or (
        res.status in (0, 2) and grad_norm <= options.outer_gtol
    )
    if not converged:
        stalled = res.status == 1 or nit >= options.outer_max_iter
        if stalled or not np.isfinite(res.fun):
            raise OuterConvergenceError(
                f"{label}: no convergence in {nit} iterations "
                f"({res.message})",
                diagnostics,
            )
        if grad_norm > _USABLE_GRAD:
            raise OuterConvergenceError(f"{label}: {res.message}", diagnostics)
        log.warning(
            "%s: stopped early with %s (grad_norm=%.2e, |df|=%.2e); "
            "reported as not converged",
            label,
            res.message,
            grad_norm,
            state["delta"],
        )
    return OuterResult(
        x=x,
        value=-float(res.fun),
        iterations=nit,
        evaluations=counter["n"],
        grad_norm=grad_norm,
        converged=converged,
        message=str(res.message),
    )


def standard_errors(
    f: Callable[[np.ndarray], float], x: np.ndarray, steps
) -> np.ndarray:
    """Covariance from central second differences of a log-likelihood."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    h = np.broadcast_to(np.asarray(steps, dtype=np.float64), (n,))
    f0 = f(x)
    hess = np.zeros((n, n))

    def at(*moves: tuple[int, float]) -> float:
        z = x.copy()
        for j, s in moves:
            z[j] += s * h[j]
        return f(z)

    for i in range(n):
        hess[i, i] = (at((i, 1)) - 2.0 * f0 + at((i, -1))) / h[i] ** 2
        for j in range(i):
            hess[i, j] = hess[j, i] = (
                at((i, 1), (j, 1))
                - at((i, 1), (j, -1))
                - at((i, -1), (j, 1))
                + at((i, -1), (j, -1))
            ) / (4.0 * h[i] * h[j])
    info = -0.5 * (hess + hess.T)
    if not np.all(np.isfinite(info)) or np.any(np.diag(info) <= 0.0):
        raise StandardErrorError("optimum not interior or flat")
    try:
        chol = cho_factor(info, lower=True)
    except LinAlgError as exc:
        raise StandardErrorError("optimum not interior or flat") from exc
    return cho_solve(chol, np.eye(n))


# ── Shared fitting pieces ────────────────────────────────────────────────────


_SM_FAMILIES = {
    FamilyKind.POISSON: sm.families.Poisson,
    FamilyKind.BERNOULLI: sm.families.Binomial,
    FamilyKind.GAUSSIAN: sm.families.Gaussian,
}


def initial_params(spec: GlmmSpec) -> ParamState:
    """GLM fit ignoring random effects; σ = 1."""
    d = spec.dataset
    params = ParamState.initial(spec)
    if spec.layout.p == 0:
        return params
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            glm = sm.GLM(
                d.y,
                d.X,
                family=_SM_FAMILIES[spec.family.kind](),
                offset=d.offset,
            ).fit()
        beta = np.asarray(glm.params, dtype=np.float64)
        if np.all(np.isfinite(beta)):
            params.beta = beta
            if spec.layout.has_phi and glm.scale > 0:
                params.phi = float(glm.scale)
        else:
            log.warning("GLM start has non-finite coefficients; using 0")
    except (ValueError, LinAlgError, PerfectSeparationError) as exc:
        log.warning("GLM start failed (%s); using beta = 0", exc)
    return params


@dataclass
class _Fit:
    """Working state of one fit, turned into a FitResult at the end."""

    spec: GlmmSpec
    options: FitOptions
    method: Method
    agh_order: Optional[int] = None
    theta: np.ndarray | None = None
    beta_cov: np.ndarray | None = None
    log_sd_se: np.ndarray | None = None
    objective: dict[str, float] = field(default_factory=dict)
    diagnostics: list[StageDiagnostics] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def stage(self, name: str, res: OuterResult, obj) -> None:
        self.objective[name] = res.value
        self.diagnostics.append(
            StageDiagnostics(
                stage=name,
                iterations=res.iterations,
                evaluations=res.evaluations,
                inner_iterations=getattr(obj, "inner_iterations", 0),
                inner_failures=getattr(obj, "failures", 0),
                grad_norm=res.grad_norm,
                objective=res.value,
                converged=res.converged,
                message=res.message,
            )
        )
        log.info(
            "%s %s: objective=%.8g iterations=%d evaluations=%d",
            self.method.value,
            name,
            res.value,
            res.iterations,
            res.evaluations,
        )


class _VarianceMap:
    """Outer coordinates <-> optimizer coordinates.

    Under the raw-SD parameterization the log_sd entries are optimized as
    σ itself with a lower bound; everything else passes through.
    """

    def __init__(self, n: int, sd_pos: np.ndarray, options: FitOptions):
        self.n = n
        self.sd_pos = sd_pos
        self.raw = options.parameterization is Parameterization.RAW_SD

    def to_outer(self, z: np.ndarray) -> np.ndarray:
        if not self.raw:
            return z
        x = np.array(z, dtype=np.float64)
        x[self.sd_pos] = np.log(np.maximum(x[self.sd_pos], _RAW_SD_FLOOR))
        return x

    def from_outer(self, x: np.ndarray) -> np.ndarray:
        if not self.raw:
            return x
        z = np.array(x, dtype=np.float64)
        z[self.sd_pos] = np.exp(z[self.sd_pos])
        return z

    def bounds(self):
        if not self.raw:
            return None
        b: list[tuple[Optional[float], Optional[float]]]
        b = [(None, None)] * self.n
        for j in self.sd_pos:
            b[int(j)] = (_RAW_SD_FLOOR, None)
        return b


def _optimize(f, x0, sd_pos, options: FitOptions, label: str) -> OuterResult:
    vmap = _VarianceMap(np.size(x0), np.asarray(sd_pos, dtype=int), options)
    res = maximize(
        lambda z: f(vmap.to_outer(z)),
        vmap.from_outer(x0),
        options,
        label,
        bounds=vmap.bounds(),
    )
    res.x = vmap.to_outer(res.x)
    return res


def _interior_cov(f, x, steps, fixed: np.ndarray) -> np.ndarray:
    """Covariance over coordinates not in `fixed`; NaN rows for fixed."""
    free = np.flatnonzero(~fixed)
    cov = np.full((x.size, x.size), np.nan)
    if free.size == 0:
        return cov

    def sub(z: np.ndarray) -> float:
        full = x.copy()
        full[free] = z
        return f(full)

    sub_cov = standard_errors(sub, x[free], np.asarray(steps)[free])
    cov[np.ix_(free, free)] = sub_cov
    return cov


def _boundary(log_sd: np.ndarray, options: FitOptions) -> np.ndarray:
    return np.exp(log_sd) < options.boundary_sigma


def _result(fit: _Fit, grouping: str) -> FitResult:
    spec = fit.spec
    lay = spec.layout
    opts = fit.options
    params = ParamState.unpack(lay, fit.theta)
    boundary = _boundary(params.log_sd, opts)
    sigma = np.where(boundary, 0.0, params.sigma)
    se_sigma: list[Optional[float]] = []
    for k in range(lay.r):
        se = None
        if fit.log_sd_se is not None and not boundary[k]:
            v = fit.log_sd_se[k]
            se = float(sigma[k] * v) if np.isfinite(v) else None
        se_sigma.append(se)
    se_beta: list[Optional[float]] = [None] * lay.p
    beta_cov = None
    if fit.beta_cov is not None:
        diag = np.diag(fit.beta_cov)
        se_beta = [float(math.sqrt(v)) if v >= 0 else None for v in diag]
        beta_cov = fit.beta_cov.tolist()
    u = [params.u1, params.u2][: lay.r]
    u = [np.where(boundary[k], 0.0, uk) for k, uk in enumerate(u)]
    try:
        fit.objective["h"] = h_loglik(spec, params, threads=opts.threads or 1)
    except NumericalError:
        pass
    d = spec.dataset
    for k in np.flatnonzero(boundary):
        log.warning(
            "sigma[%d] at the boundary (< %g); reported as 0",
            k,
            opts.boundary_sigma,
        )
    fit.timings["total"] = sum(
        fit.timings.get(k, 0.0)
        for k in ("tape_build", "stage1", "stage2", "uncertainty")
    )
    return FitResult(
        method=_label(fit.method, fit.agh_order),
        method_kind=fit.method,
        agh_order=fit.agh_order,
        family=spec.family.kind,
        grouping=grouping,
        n_obs=d.n_obs,
        levels=spec.levels,
        column_names=list(d.column_names),
        beta=params.beta.tolist(),
        se_beta=se_beta,
        beta_cov=beta_cov,
        sigma=sigma.tolist(),
        se_sigma=se_sigma,
        sigma_boundary=boundary.tolist(),
        phi=params.phi if lay.has_phi else None,
        u=[np.asarray(x, dtype=float).tolist() for x in u],
        objective=fit.objective,
        diagnostics=fit.diagnostics,
        timings=StageTimings(**fit.timings),
    )


def _label(method: Method, m: Optional[int]) -> str:
    return f"AGH({m})" if method is Method.AGH else method.value


def _steps(n_beta: int, n_var: int, options: FitOptions) -> np.ndarray:
    return np.concatenate(
        [
            np.full(n_beta, options.se_step_beta),
            np.full(n_var, options.se_step_log_sd),
        ]
    )


# ── Workflows ────────────────────────────────────────────────────────────────


def _laplace(fit: _Fit, include_beta: bool, theta0: np.ndarray, tape=None):
    opts = fit.options
    with stopwatch(fit.timings, "tape_build"):
        return LaplaceObjective(
            fit.spec,
            include_beta,
            theta0,
            tape,
            tol=opts.inner_tol,
            max_iter=opts.inner_max_iter,
        )


def _stage_reml(fit: _Fit, theta0: np.ndarray):
    """Maximize p_{β,u}(h) over the variance parameters."""
    obj = _laplace(fit, True, theta0)
    x0 = theta0[obj.outer_index]
    sd_pos = np.arange(fit.spec.layout.r)
    with stopwatch(fit.timings, "stage1"):
        res = _optimize(obj.safe_value, x0, sd_pos, fit.options, "stage1")
        sol = obj.solve(res.x)
    fit.stage("stage1", res, obj)
    return obj, res, sol


def _beta_block(factor, p: int) -> np.ndarray:
    """β-block of the inverse joint (β, u) negative Hessian."""
    if p == 0:
        return np.zeros((0, 0))
    return factor.trailing_inverse()[-p:, -p:]


def _variance_cov(fit: _Fit, obj: LaplaceObjective, x: np.ndarray, sol):
    """Covariance of the variance parameters from the stage-1 Hessian."""
    lay = fit.spec.layout
    w_opt = sol.w_hat.copy()
    fixed = np.zeros(x.size, dtype=bool)
    fixed[: lay.r] = _boundary(x[: lay.r], fit.options)

    def f(z: np.ndarray) -> float:
        return profile_value(obj.solve(z, start=w_opt))

    steps = np.full(x.size, fit.options.se_step_log_sd)
    cov = _interior_cov(f, x, steps, fixed)
    obj.solve(x, start=w_opt)
    return cov


def _maybe_refine(spec: GlmmSpec, out: FitResult, opts: FitOptions):
    if opts.refine_random_effects:
        return refine_random_effects(spec, out, opts)
    return out


def fit_hl11(
    spec: GlmmSpec, options: FitOptions | None = None, grouping: str = "ip"
) -> FitResult:
    opts = options or FitOptions()
    fit = _Fit(spec, opts, Method.HL11)
    lay = spec.layout
    theta0 = initial_params(spec).pack(lay)
    obj1, res1, sol1 = _stage_reml(fit, theta0)
    if opts.compute_se:
        with stopwatch(fit.timings, "uncertainty"):
            cov1 = _variance_cov(fit, obj1, res1.x, sol1)
            fit.log_sd_se = np.sqrt(np.diag(cov1)[: lay.r])

    # stage 2 reuses the tape; β starts from the stage-1 inner optimum
    theta1 = obj1.full_theta(res1.x, sol1.w_hat)
    obj2 = _laplace(fit, False, theta1, obj1.tape)
    x2 = theta1[obj2.outer_index]

    def with_beta(beta: np.ndarray) -> np.ndarray:
        x = x2.copy()
        x[: lay.p] = beta
        return x

    with stopwatch(fit.timings, "stage2"):
        res2 = _optimize(
            lambda b: obj2.safe_value(with_beta(b)),
            theta1[lay.beta],
            [],
            opts,
            "stage2",
        )
        sol2 = obj2.solve(with_beta(res2.x))
    fit.stage("stage2", res2, obj2)
    fit.theta = obj2.full_theta(with_beta(res2.x), sol2.w_hat)

    if opts.compute_se:
        with stopwatch(fit.timings, "uncertainty"):
            w_opt = sol2.w_hat.copy()
            fit.beta_cov = standard_errors(
                lambda b: profile_value(obj2.solve(with_beta(b), w_opt)),
                res2.x,
                np.full(lay.p, opts.se_step_beta),
            )
    return _maybe_refine(spec, _result(fit, grouping), opts)


def fit_hl01(
    spec: GlmmSpec, options: FitOptions | None = None, grouping: str = "ip"
) -> FitResult:
    opts = options or FitOptions()
    fit = _Fit(spec, opts, Method.HL01)
    lay = spec.layout
    theta0 = initial_params(spec).pack(lay)
    obj, res, sol = _stage_reml(fit, theta0)
    fit.theta = obj.full_theta(res.x, sol.w_hat)
    if opts.compute_se:
        with stopwatch(fit.timings, "uncertainty"):
            fit.beta_cov = _beta_block(sol.factor, lay.p)
            cov1 = _variance_cov(fit, obj, res.x, sol)
            fit.log_sd_se = np.sqrt(np.diag(cov1)[: lay.r])
    return _maybe_refine(spec, _result(fit, grouping), opts)


def _fit_joint(
    fit: _Fit, obj, theta0: np.ndarray, grouping: str
) -> FitResult:
    """Maximize over [β, log_sd (, log_phi)] jointly."""
    spec, opts = fit.spec, fit.options
    lay = spec.layout
    x0 = theta0[lay.nonrandom_index(include_beta=False)]
    sd_pos = lay.p + np.arange(lay.r)
    with stopwatch(fit.timings, "stage1"):
        res = _optimize(obj.safe_value, x0, sd_pos, opts, "stage1")
    fit.stage("stage1", res, obj)
    theta = theta0.copy()
    theta[lay.nonrandom_index(include_beta=False)] = res.x
    if isinstance(obj, LaplaceObjective):
        sol = obj.solve(res.x)
        theta[obj.w_index] = sol.w_hat
        w_opt = sol.w_hat.copy()

        def f(x: np.ndarray) -> float:
            return profile_value(obj.solve(x, start=w_opt))

    else:
        theta[lay.u1] = obj.modes(res.x)
        f = obj
    fit.theta = theta

    if opts.compute_se:
        with stopwatch(fit.timings, "uncertainty"):
            fixed = np.zeros(res.x.size, dtype=bool)
            fixed[sd_pos] = _boundary(res.x[sd_pos], opts)
            steps = _steps(lay.p, res.x.size - lay.p, opts)
            cov = _interior_cov(f, res.x, steps, fixed)
            fit.beta_cov = cov[: lay.p, : lay.p]
            fit.log_sd_se = np.sqrt(np.diag(cov)[sd_pos])
    return _result(fit, grouping)


def fit_mle(
    spec: GlmmSpec, options: FitOptions | None = None, grouping: str = "ip"
) -> FitResult:
    opts = options or FitOptions()
    fit = _Fit(spec, opts, Method.MLE)
    theta0 = initial_params(spec).pack(spec.layout)
    obj = _laplace(fit, False, theta0)
    return _maybe_refine(spec, _fit_joint(fit, obj, theta0, grouping), opts)


def fit_agh(
    spec: GlmmSpec,
    m: int,
    options: FitOptions | None = None,
    grouping: str = "ip",
) -> FitResult:
    opts = options or FitOptions()
    if m < 0:
        raise ConfigError(f"AGH order must be >= 0, got {m}")
    if m == 0:
        return _fit_agh0(spec, opts, grouping)
    crossed = spec.factor_structure is FactorStructure.CROSSED
    if crossed and m > 1:
        raise StructureError(
            "AGH with more than one node needs a single-factor model; "
            "use m=0, m=1 or a Laplace method for crossed factors"
        )
    fit = _Fit(spec, opts, Method.AGH, agh_order=m)
    theta0 = initial_params(spec).pack(spec.layout)
    if crossed:
        # a single node is the Laplace approximation
        obj = _laplace(fit, False, theta0)
    else:
        obj = AghObjective(spec, m)
    return _fit_joint(fit, obj, theta0, grouping)


def _fit_agh0(spec: GlmmSpec, opts: FitOptions, grouping: str) -> FitResult:
    fit = _Fit(spec, opts, Method.AGH0, agh_order=0)
    lay = spec.layout
    theta0 = initial_params(spec).pack(lay)
    with stopwatch(fit.timings, "tape_build"):
        obj = ZeroOrderObjective(spec, theta0)
    x0 = theta0[obj.outer_index]
    with stopwatch(fit.timings, "stage1"):
        res = _optimize(obj.safe_value, x0, np.arange(lay.r), opts, "stage1")
        obj(res.x)
    fit.stage("stage1", res, obj.joint)
    fit.theta = obj.last_theta
    if opts.compute_se:
        with stopwatch(fit.timings, "uncertainty"):
            sol = obj.joint.solve(res.x)
            fit.beta_cov = _beta_block(sol.factor, lay.p)
            fixed = np.zeros(res.x.size, dtype=bool)
            fixed[: lay.r] = _boundary(res.x[: lay.r], opts)
            steps = np.full(res.x.size, opts.se_step_log_sd)
            cov = _interior_cov(obj, res.x, steps, fixed)
            fit.log_sd_se = np.sqrt(np.diag(cov)[: lay.r])
    return _result(fit, grouping)


def refine_random_effects(
    spec: GlmmSpec, fit: FitResult, options: FitOptions | None = None
) -> FitResult:
    """Re-solve max_u h(β̂, u; σ̂) and replace the u predictions."""
    opts = options or FitOptions()
    lay = spec.layout
    params = ParamState.initial(spec, fit.beta)
    floor = math.log(_RAW_SD_FLOOR)
    params.log_sd = np.array(
        [math.log(s) if s > 0 else floor for s in fit.sigma]
    )
    if fit.phi is not None:
        params.phi = fit.phi
    theta = params.pack(lay)
    obj = LaplaceObjective(
        spec, False, theta, tol=opts.inner_tol, max_iter=opts.inner_max_iter
    )
    sol = obj.solve(theta[obj.outer_index], start=np.zeros(lay.q))
    u = [sol.w_hat[lay.u1], sol.w_hat[lay.u2]][: lay.r]
    u = [
        np.zeros_like(uk) if fit.sigma_boundary[k] else uk
        for k, uk in enumerate(u)
    ]
    log.info("refined random effects (%d inner iterations)", sol.iterations)
    return fit.model_copy(
        update={"u": [uk.tolist() for uk in u], "u_refined": True}
    )


def fit(
    spec: GlmmSpec,
    method: Method | str,
    options: FitOptions | None = None,
    m: Optional[int] = None,
    grouping: str = "ip",
) -> FitResult:
    method = Method(method)
    log.info(
        "fitting %s: family=%s N=%d levels=%s p=%d",
        _label(method, m),
        spec.family.kind.value,
        spec.dataset.n_obs,
        spec.levels,
        spec.layout.p,
    )
    if method is Method.HL11:
        return fit_hl11(spec, options, grouping)
    if method is Method.HL01:
        return fit_hl01(spec, options, grouping)
    if method is Method.MLE:
        return fit_mle(spec, options, grouping)
    if method is Method.AGH0:
        return fit_agh(spec, 0, options, grouping)
    if m is None:
        raise ConfigError("AGH needs a quadrature order m")
    return fit_agh(spec, m, options, grouping)


def parse_method(label: str) -> tuple[Method, Optional[int]]:
    """'HL11', 'MLE', 'AGH0', 'AGH5' or 'AGH(5)' -> (method, order)."""
    text = label.strip().upper().replace("(", "").replace(")", "")
    if text in {m.value for m in Method if m is not Method.AGH}:
        method = Method(text)
        return method, 0 if method is Method.AGH0 else None
    if text.startswith("AGH") and text[3:].isdigit():
        m = int(text[3:])
        return (Method.AGH0, 0) if m == 0 else (Method.AGH, m)
    raise ConfigError(
        f"unknown method '{label}'; use HL11, HL01, MLE, AGH0 or AGH<m>"
    )


def fit_label(
    spec: GlmmSpec,
    label: str,
    options: FitOptions | None = None,
    grouping: str = "ip",
) -> FitResult:
    method, m = parse_method(label)
    return fit(spec, method, options, m, grouping)
