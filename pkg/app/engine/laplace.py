"""
Inner optimization over the designated-random arguments w, structured
log-determinants, and the adjusted profile

    p_w(h) = h(ŵ) + (dim w / 2)·log 2π − ½·log|−H(h, ŵ)|,

which is also the Laplace approximation of log ∫ exp(h) dw.

The negative Hessian is handled in the block form [D C; Cᵀ B] with D
diagonal (first grouping factor) and B a small dense trailing block
(second factor, plus β when β is designated random). D is eliminated
first; only the Schur complement B − CᵀD⁻¹C is factorized densely.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from app.engine.adtape import (
    SparsityPattern,
    Tape,
    hessian,
    record,
    value_and_gradient,
)
from app.engine.model import GlmmSpec, ParamState, record_h
from app.errors import ConfigError, InnerSolveError, NumericalError

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)

INNER_TOL = 1e-8
INNER_MAX_ITER = 100
MAX_HALVINGS = 30


# ── Structured factorization ─────────────────────────────────────────────────


@dataclass(frozen=True)
class StructuredFactor:
    d: np.ndarray
    c: sp.csr_matrix
    chol: tuple[np.ndarray, bool] | None
    logdet: float

    @property
    def n_diag(self) -> int:
        return int(self.d.size)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve [D C; Cᵀ B] x = rhs."""
        nd = self.n_diag
        r1, r2 = rhs[:nd], rhs[nd:]
        if self.chol is None:
            return r1 / self.d
        x2 = cho_solve(self.chol, r2 - self.c.T @ (r1 / self.d))
        x1 = (r1 - self.c @ x2) / self.d
        return np.concatenate([x1, x2])

    def trailing_inverse(self) -> np.ndarray:
        """Trailing diagonal block of the full inverse, i.e. S⁻¹."""
        if self.chol is None:
            return np.zeros((0, 0))
        m = self.chol[0].shape[0]
        return cho_solve(self.chol, np.eye(m))


def factorize(d: np.ndarray, c, b: np.ndarray) -> StructuredFactor:
    d = np.asarray(d, dtype=np.float64)
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if d.size and not (np.all(np.isfinite(d)) and d.min() > 0.0):
        raise InnerSolveError("indefinite inner Hessian (diagonal block)")
    logdet = math.fsum(np.log(d)) if d.size else 0.0
    nb = b.shape[0] if b.size else 0
    c = sp.csr_matrix(c) if c is not None else sp.csr_matrix((d.size, nb))
    if nb == 0:
        return StructuredFactor(d, c, None, logdet)
    schur = b - (c.T @ sp.diags(1.0 / d) @ c).toarray() if d.size else b
    schur = 0.5 * (schur + schur.T)
    try:
        chol = cho_factor(schur, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise InnerSolveError(
            "indefinite inner Hessian (Schur complement)"
        ) from exc
    logdet += 2.0 * math.fsum(np.log(np.diag(chol[0])))
    return StructuredFactor(d, c, chol, logdet)


def logdet_structured(d, c, b) -> float:
    """log|[D C; Cᵀ B]| via the Schur complement of the diagonal block."""
    return factorize(d, c, b).logdet


# ── Inner problem ────────────────────────────────────────────────────────────


@dataclass
class InnerProblem:
    """Maximize a tape over the entries `w_index` of its input vector.

    Entries outside `w_index` stay frozen at their values in `theta`.
    """

    tape: Tape
    theta: np.ndarray
    w_index: np.ndarray
    n_diag: int = 0
    pattern: SparsityPattern | None = None

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64).copy()
        self.w_index = np.asarray(self.w_index, dtype=np.int64)
        if self.pattern is None:
            self.pattern = self.tape.pattern.restrict(self.w_index)
        if self.n_diag and not self.pattern.block_is_diagonal(self.n_diag):
            log.debug("leading block not diagonal; factorizing densely")
            self.n_diag = 0

    @classmethod
    def from_function(cls, f, w0, n_diag: int = 0) -> "InnerProblem":
        w0 = np.atleast_1d(np.asarray(w0, dtype=np.float64))
        tape = record(f, w0)
        return cls(tape, w0, np.arange(w0.size), n_diag)

    @property
    def dim(self) -> int:
        return int(self.w_index.size)

    def _full(self, w: np.ndarray) -> np.ndarray:
        theta = self.theta.copy()
        theta[self.w_index] = w
        return theta

    def value_grad(self, w: np.ndarray) -> tuple[float, np.ndarray]:
        value, grad = value_and_gradient(self.tape, self._full(w))
        return value, grad[self.w_index]

    def factor(self, w: np.ndarray) -> StructuredFactor:
        neg = -hessian(self.tape, self._full(w), self.pattern)
        nd = self.n_diag
        d = neg.diagonal()[:nd]
        c = neg[:nd, nd:]
        b = neg[nd:, nd:].toarray()
        return factorize(d, c, b)


@dataclass
class InnerSolution:
    w_hat: np.ndarray
    logdet_negH: float
    iterations: int
    grad_norm: float
    h_value: float
    factor: StructuredFactor = field(repr=False)


def inner_newton(
    problem: InnerProblem,
    w_start: np.ndarray,
    tol: float = INNER_TOL,
    max_iter: int = INNER_MAX_ITER,
    max_halvings: int = MAX_HALVINGS,
    min_steps: int = 0,
) -> InnerSolution:
    """Newton ascent with step halving.

    `min_steps` forces Newton steps even when the start already meets the
    tolerance; a warm start then still ends on a fully polished optimum.
    """
    w = np.array(w_start, dtype=np.float64)
    f, g = problem.value_grad(w)
    factor = problem.factor(w)
    for it in range(max_iter + 1):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= tol and it >= min_steps:
            return InnerSolution(w, factor.logdet, it, gnorm, f, factor)
        if it == max_iter:
            raise InnerSolveError(
                f"inner Newton did not converge in {max_iter} iterations "
                f"(grad_norm={gnorm:.3e})",
                grad_norm=gnorm,
            )
        step = factor.solve(g)
        predicted = 0.5 * float(g @ step)
        noise = 1e-12 * max(1.0, abs(f))
        t = 1.0
        for _ in range(max_halvings + 1):
            w_new = w + t * step
            try:
                f_new, g_new = problem.value_grad(w_new)
            except NumericalError:
                t *= 0.5
                continue
            if f_new >= f or (predicted * t < noise and f_new >= f - noise):
                break
            t *= 0.5
        else:
            raise InnerSolveError(
                f"step halving failed to increase h (grad_norm={gnorm:.3e})",
                grad_norm=gnorm,
            )
        w, f, g = w_new, f_new, g_new
        factor = problem.factor(w)
        log.debug("inner it=%d h=%.10g step=%.3g", it + 1, f, t)
    raise AssertionError("unreachable")


def profile_value(solution: InnerSolution) -> float:
    n_w = solution.w_hat.size
    return (
        solution.h_value
        + 0.5 * n_w * _LOG_2PI
        - 0.5 * solution.logdet_negH
    )


def adjusted_profile(problem: InnerProblem, w_start: np.ndarray) -> float:
    return profile_value(inner_newton(problem, w_start))


# ── GLMM marginal likelihood ─────────────────────────────────────────────────


class LaplaceObjective:
    """p_w(h) of a GLMM as a function of its non-random parameters.

    The h tape is recorded once; each evaluation re-solves the inner
    problem starting from the previous optimum.
    """

    def __init__(
        self,
        spec: GlmmSpec,
        include_beta: bool,
        theta0: np.ndarray,
        tape: Tape | None = None,
        tol: float = INNER_TOL,
        max_iter: int = INNER_MAX_ITER,
    ):
        self.spec = spec
        self.tol = tol
        self.max_iter = max_iter
        self.layout = spec.layout
        self.include_beta = include_beta
        self.tape = tape if tape is not None else record_h(spec, theta0)
        self.w_index = self.layout.random_index(include_beta)
        self.outer_index = self.layout.nonrandom_index(include_beta)
        self.pattern = self.tape.pattern.restrict(self.w_index)
        self.n_diag = (
            self.layout.q1
            if self.pattern.block_is_diagonal(self.layout.q1)
            else 0
        )
        self._theta0 = np.asarray(theta0, dtype=np.float64).copy()
        self._warm = self._theta0[self.w_index].copy()
        self.evaluations = 0
        self.inner_iterations = 0
        self.failures = 0

    def problem(self, outer: np.ndarray) -> InnerProblem:
        theta = self._theta0.copy()
        theta[self.outer_index] = outer
        return InnerProblem(
            self.tape, theta, self.w_index, self.n_diag, self.pattern
        )

    def solve(
        self, outer: np.ndarray, start: np.ndarray | None = None
    ) -> InnerSolution:
        """Inner optimum at `outer`; falls back to a cold start once."""
        problem = self.problem(np.asarray(outer, dtype=np.float64))
        self.evaluations += 1
        w0 = self._warm if start is None else start
        kwargs = dict(tol=self.tol, max_iter=self.max_iter, min_steps=1)
        try:
            sol = inner_newton(problem, w0, **kwargs)
        except NumericalError as exc:
            log.debug("warm inner start failed (%s); retrying cold", exc)
            sol = inner_newton(problem, self._theta0[self.w_index], **kwargs)
        self._warm = sol.w_hat.copy()
        self.inner_iterations += sol.iterations
        return sol

    def __call__(self, outer: np.ndarray) -> float:
        return profile_value(self.solve(outer))

    def safe_value(self, outer: np.ndarray) -> float:
        """p_w, or -inf when the inner problem cannot be solved."""
        try:
            return self(outer)
        except NumericalError as exc:
            self.failures += 1
            log.debug("inner failure at outer=%s: %s", outer, exc)
            return -math.inf

    def full_theta(self, outer: np.ndarray, w: np.ndarray) -> np.ndarray:
        theta = self._theta0.copy()
        theta[self.outer_index] = outer
        theta[self.w_index] = w
        return theta


def laplace_marginal_loglik(
    spec: GlmmSpec,
    params_nonrandom: ParamState,
    designated_random: str = "u",
) -> float:
    """Laplace approximation of log ∫ exp(h) dw.

    `designated_random` is "u" (integrate the random effects; the ML
    marginal) or "beta+u" (integrate β as well; the REML criterion).
    """
    if designated_random not in ("u", "beta+u"):
        raise ConfigError(
            f"unknown random designation {designated_random!r}; "
            "use 'u' or 'beta+u'"
        )
    theta0 = params_nonrandom.pack(spec.layout)
    obj = LaplaceObjective(spec, designated_random == "beta+u", theta0)
    return obj(theta0[obj.outer_index])
