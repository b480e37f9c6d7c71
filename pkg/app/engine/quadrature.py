"""
Gauss-Hermite rules, adaptive Gauss-Hermite (AGH) marginal likelihoods for
single-factor models, the zero-order (AGH0) criterion, and tensor-grid
oracles for tiny two-factor models.

AGH for group g centers the rule at the conditional mode û_g and scales it
by τ_g = (−h_g''(û_g))^(−1/2):

    log ∫ exp(h_g) du ≈ log[ √2 τ_g Σ_k w_k exp(h_g(û_g + √2 τ_g x_k) + x_k²) ]

With one node this is exactly the per-group Laplace term.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from cachetools import LRUCache, cached
from scipy.linalg import LinAlgError, cho_factor, eigh_tridiagonal, inv
from scipy.special import logsumexp

from app.engine import family as fam_mod
from app.engine.adtape import hessian
from app.engine.laplace import InnerProblem, LaplaceObjective, inner_newton
from app.engine.model import GlmmSpec, ParamState, record_h
from app.errors import (
    ConfigError,
    NumericalError,
    QuadratureError,
    StructureError,
)
from app.models.enums import FactorStructure
from app.utils.reduction import chunked_sum

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)

MAX_ORDER = 101
MAX_GRID_DIM = 8
MAX_GRID_POINTS = 50_000_000
_GRID_CHUNK = 1 << 15
_MODE_TOL = 1e-10
_MODE_MAX_ITER = 100


@dataclass(frozen=True)
class GhRule:
    order: int
    nodes: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray


@cached(cache=LRUCache(maxsize=64))
def gh_nodes(m: int) -> GhRule:
    """Golub-Welsch rule for the weight e^(−x²)."""
    if not isinstance(m, (int, np.integer)) or not 1 <= m <= MAX_ORDER:
        raise ConfigError(
            f"Gauss-Hermite order must be in [1, {MAX_ORDER}], got {m}"
        )
    m = int(m)
    if m == 1:
        nodes = np.zeros(1)
        weights = np.array([math.sqrt(math.pi)])
    else:
        off = np.sqrt(np.arange(1, m) / 2.0)
        x, vecs = eigh_tridiagonal(np.zeros(m), off)
        w = math.sqrt(math.pi) * vecs[0] ** 2
        # exact symmetry about 0
        nodes = 0.5 * (x - x[::-1])
        weights = 0.5 * (w + w[::-1])
    # outermost weights can underflow to 0; their log is -inf
    with np.errstate(divide="ignore"):
        log_weights = np.log(weights)
    for arr in (nodes, weights, log_weights):
        arr.setflags(write=False)
    return GhRule(m, nodes, weights, log_weights)


# ── Single-factor AGH ────────────────────────────────────────────────────────


@dataclass
class _GroupData:
    """Observations of a single-factor model, pre-split for group sums."""

    fam: fam_mod.Family
    y: np.ndarray
    const: np.ndarray
    group: np.ndarray
    q: int

    def h_groups(self, eta0, u, sigma, phi) -> np.ndarray:
        """Per-group h_g(u_g), vectorized over groups."""
        terms = fam_mod.log_terms(
            self.fam, self.y, eta0 + u[self.group], phi, self.const
        )
        data = np.bincount(self.group, weights=terms, minlength=self.q)
        return data - 0.5 * (u / sigma) ** 2 - math.log(sigma) - 0.5 * _LOG_2PI

    def derivatives(self, eta0, u, sigma, phi):
        d1, d2 = fam_mod.eta_derivatives(
            self.fam, self.y, eta0 + u[self.group], phi
        )
        g = np.bincount(self.group, weights=d1, minlength=self.q)
        h2 = np.bincount(self.group, weights=d2, minlength=self.q)
        return g - u / sigma**2, h2 - 1.0 / sigma**2


def _group_modes(gd: _GroupData, eta0, sigma, phi, u0=None):
    """Conditional modes û_g by vectorized 1-D Newton with step halving."""
    u = np.zeros(gd.q) if u0 is None else np.array(u0, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        f = gd.h_groups(eta0, u, sigma, phi)
        for it in range(_MODE_MAX_ITER):
            g, h2 = gd.derivatives(eta0, u, sigma, phi)
            # at least one step, so warm starts end fully polished
            if it and np.max(np.abs(g)) <= _MODE_TOL:
                return u, h2
            step = -g / h2
            if it and np.all(np.abs(step) <= 1e-13 * (1.0 + np.abs(u))):
                return u, h2
            active = np.abs(g) > (_MODE_TOL if it else 0.0)
            t = np.ones(gd.q)
            for _ in range(30):
                trial = u + np.where(active, t * step, 0.0)
                f_new = gd.h_groups(eta0, trial, sigma, phi)
                worse = active & ~(f_new >= f - 1e-14 * np.abs(f))
                if not worse.any():
                    break
                t = np.where(worse, 0.5 * t, t)
            # groups with no ascent after all halvings keep their iterate
            if worse.any():
                if np.array_equal(worse, active):
                    break
                trial = np.where(worse, u, trial)
                f_new = np.where(worse, f, f_new)
            u, f = trial, f_new
    raise QuadratureError("conditional mode search did not converge")


def _single_factor_data(spec: GlmmSpec) -> _GroupData:
    if spec.factor_structure is not FactorStructure.SINGLE:
        raise StructureError(
            "adaptive Gauss-Hermite applies to single-factor models only"
        )
    d = spec.dataset
    return _GroupData(spec.family, d.y, spec.log_const, d.group1, d.q1)


def _agh_terms(gd: _GroupData, eta0, sigma, m, phi, u0=None):
    rule = gh_nodes(m)
    u_hat, h2 = _group_modes(gd, eta0, sigma, phi, u0)
    tau = 1.0 / np.sqrt(-h2)
    scale = math.sqrt(2.0) * tau
    grid = np.empty((gd.q, rule.order))
    for k, x in enumerate(rule.nodes):
        grid[:, k] = (
            rule.log_weights[k]
            + gd.h_groups(eta0, u_hat + scale * x, sigma, phi)
            + x * x
        )
    return np.log(scale) + logsumexp(grid, axis=1), u_hat


def agh_group_logintegral(
    fam, y, eta0, sigma: float, m: int, phi: float = 1.0
) -> float:
    """AGH log ∫ exp(h_g) du for one group.

    `eta0` is the group's fixed part of the linear predictor (Xβ + offset).
    """
    fam = fam_mod.Family.of(fam)
    y = fam_mod.validate_response(fam, y, phi)
    eta0 = np.asarray(eta0, dtype=np.float64)
    gd = _GroupData(
        fam,
        y,
        fam_mod.log_normalizer(fam, y),
        np.zeros(y.size, dtype=np.int64),
        1,
    )
    terms, _ = _agh_terms(gd, eta0, float(sigma), m, phi)
    return float(terms[0])


def agh_marginal_loglik(
    spec: GlmmSpec, beta, sigma: float, m: int, phi: float = 1.0
) -> float:
    gd = _single_factor_data(spec)
    d = spec.dataset
    eta0 = d.X @ np.asarray(beta, dtype=np.float64) + d.offset
    terms, _ = _agh_terms(gd, eta0, float(sigma), m, phi)
    return chunked_sum(terms)


class AghObjective:
    """AGH-m marginal log-likelihood over [β, log σ (, log φ)]."""

    def __init__(self, spec: GlmmSpec, m: int):
        self.spec = spec
        self.m = m
        self.gd = _single_factor_data(spec)
        self._u = np.zeros(self.gd.q)
        self.evaluations = 0
        self.failures = 0

    def _unpack(self, outer: np.ndarray):
        lay = self.spec.layout
        beta = outer[: lay.p]
        sigma = math.exp(outer[lay.p])
        phi = math.exp(outer[lay.p + 1]) if lay.has_phi else 1.0
        return beta, sigma, phi

    def __call__(self, outer: np.ndarray) -> float:
        self.evaluations += 1
        beta, sigma, phi = self._unpack(np.asarray(outer, dtype=np.float64))
        d = self.spec.dataset
        eta0 = d.X @ beta + d.offset
        try:
            terms, u_hat = _agh_terms(
                self.gd, eta0, sigma, self.m, phi, self._u
            )
        except QuadratureError:
            terms, u_hat = _agh_terms(self.gd, eta0, sigma, self.m, phi)
        value = chunked_sum(terms)
        if np.isfinite(value):
            self._u = u_hat
        return value

    def safe_value(self, outer: np.ndarray) -> float:
        try:
            value = self(outer)
        except QuadratureError as exc:
            self.failures += 1
            log.debug("AGH evaluation failed: %s", exc)
            return -math.inf
        return value if np.isfinite(value) else -math.inf

    def modes(self, outer: np.ndarray) -> np.ndarray:
        beta, sigma, phi = self._unpack(np.asarray(outer, dtype=np.float64))
        d = self.spec.dataset
        u_hat, _ = _group_modes(self.gd, d.X @ beta + d.offset, sigma, phi)
        return u_hat


# ── Zero-order criterion ─────────────────────────────────────────────────────


class ZeroOrderObjective:
    """AGH0: h maximized jointly over (β, u), u-block Laplace term only.

    A function of the variance parameters alone; β̂ is read from the joint
    mode. Deliberately biased: the β-block of the curvature is ignored.
    """

    def __init__(self, spec: GlmmSpec, theta0: np.ndarray):
        self.spec = spec
        self.joint = LaplaceObjective(spec, include_beta=True, theta0=theta0)
        lay = spec.layout
        self._u_index = lay.random_index(include_beta=False)
        self._u_pattern = self.joint.tape.pattern.restrict(self._u_index)
        self.evaluations = 0
        self.failures = 0
        self.last_theta: np.ndarray | None = None

    @property
    def outer_index(self) -> np.ndarray:
        return self.joint.outer_index

    def __call__(self, outer: np.ndarray) -> float:
        self.evaluations += 1
        sol = self.joint.solve(outer)
        theta = self.joint.full_theta(outer, sol.w_hat)
        u_problem = InnerProblem(
            self.joint.tape,
            theta,
            self._u_index,
            self.spec.layout.q1,
            self._u_pattern,
        )
        factor = u_problem.factor(theta[self._u_index])
        self.last_theta = theta
        q = self._u_index.size
        return sol.h_value + 0.5 * q * _LOG_2PI - 0.5 * factor.logdet

    def safe_value(self, outer: np.ndarray) -> float:
        try:
            return self(outer)
        except NumericalError as exc:
            self.failures += 1
            log.debug("AGH0 evaluation failed: %s", exc)
            return -math.inf


# ── Tensor-grid oracle ───────────────────────────────────────────────────────


def _grid_h(spec: GlmmSpec, eta0, U, sigma, phi) -> np.ndarray:
    """h evaluated at each row of U (points x q)."""
    d = spec.dataset
    lay = spec.layout
    eta = eta0[None, :] + U[:, d.group1]
    if d.group2 is not None:
        eta = eta + U[:, lay.q1 + d.group2]
    terms = fam_mod.log_terms(
        spec.family, d.y[None, :], eta, phi, spec.log_const[None, :]
    )
    prior_sd = np.repeat(sigma, spec.levels)
    prior = -0.5 * np.sum((U / prior_sd) ** 2, axis=1) - np.sum(
        np.log(prior_sd) + 0.5 * _LOG_2PI
    )
    return terms.sum(axis=1) + prior


def tensor_marginal_loglik(
    spec: GlmmSpec, beta, sigma, m: int, phi: float = 1.0
) -> float:
    """Adaptive tensor-product GH over all random effects jointly.

    The grid is centered at the joint mode and rotated/scaled by the
    Cholesky factor of the inverse negative Hessian.
    """
    lay = spec.layout
    q = lay.q
    if q > MAX_GRID_DIM:
        raise StructureError(
            f"tensor-grid oracle needs q1+q2 <= {MAX_GRID_DIM} (got {q}); "
            "use the single-factor product oracle instead"
        )
    rule = gh_nodes(m)
    n_points = rule.order**q
    if n_points > MAX_GRID_POINTS:
        raise QuadratureError(
            f"{rule.order}^{q} grid points exceed {MAX_GRID_POINTS}"
        )
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    beta = np.asarray(beta, dtype=np.float64)
    params = ParamState.initial(spec, beta)
    params.log_sd = np.log(sigma)
    params.phi = phi
    theta = params.pack(lay)
    tape = record_h(spec, theta)
    problem = InnerProblem(tape, theta, lay.random_index(False))
    sol = inner_newton(problem, np.zeros(q))
    theta[problem.w_index] = sol.w_hat
    neg_h = -hessian(tape, theta, problem.pattern).toarray()
    try:
        cov = inv(neg_h)
        chol = cho_factor(0.5 * (cov + cov.T), lower=True)[0]
    except (LinAlgError, ValueError) as exc:
        raise QuadratureError(
            "negative Hessian at the mode is not PD"
        ) from exc
    lower = np.tril(chol)
    scale = math.sqrt(2.0) * lower
    log_det_scale = float(np.sum(np.log(np.diag(scale))))

    d = spec.dataset
    eta0 = d.X @ beta + d.offset
    shape = (rule.order,) * q
    running = -math.inf
    for start in range(0, n_points, _GRID_CHUNK):
        stop = min(start + _GRID_CHUNK, n_points)
        idx = np.stack(np.unravel_index(np.arange(start, stop), shape), axis=1)
        x = rule.nodes[idx]
        log_w = rule.log_weights[idx].sum(axis=1)
        U = sol.w_hat[None, :] + x @ scale.T
        with np.errstate(over="ignore"):
            vals = log_w + _grid_h(spec, eta0, U, sigma, phi) + np.sum(
                x * x, axis=1
            )
        running = float(logsumexp([running, logsumexp(vals)]))
    log.debug("tensor oracle: %d points, m=%d, q=%d", n_points, m, q)
    return log_det_scale + running


def oracle_marginal_loglik(
    spec: GlmmSpec, beta, sigma, m: int, phi: float = 1.0
) -> float:
    """High-order quadrature reference for log ∫ exp(h) du."""
    if spec.factor_structure is FactorStructure.SINGLE:
        return agh_marginal_loglik(
            spec, beta, float(np.atleast_1d(sigma)[0]), m, phi
        )
    return tensor_marginal_loglik(spec, beta, sigma, m, phi)
