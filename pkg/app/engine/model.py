"""
GLMM specification and the hierarchical log-likelihood

    h = Σ_i log f(y_i | η_i, φ) + Σ_factors Σ_levels log N(u; 0, σ²),
    η_i = x_iᵀβ + u1[g1(i)] + u2[g2(i)] + offset_i.

The random-effect design is never materialized; grouping maps index the
level vectors directly.

Parameter vector layout shared by every tape:

    θ = [u1 (q1) | u2 (q2) | β (p) | log_sd (r) | log_phi (Gaussian only)]
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from app.engine import family as fam_mod
from app.engine.adtape import Tape, record
from app.engine.family import Family
from app.errors import (
    DimensionError,
    NonFiniteLikelihoodError,
    StructureError,
)
from app.models.enums import FactorStructure, FamilyKind
from app.utils.reduction import chunked_sum, parallel_chunked_sum

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Dataset:
    y: np.ndarray
    offset: np.ndarray
    X: np.ndarray
    group1: np.ndarray
    q1: int
    group2: np.ndarray | None = None
    q2: int = 0
    column_names: tuple[str, ...] = ()
    level_labels: tuple[tuple, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        n = self.y.shape[0] if np.ndim(self.y) == 1 else -1
        if n < 1:
            raise DimensionError("dataset must hold at least one observation")
        if self.offset.shape != (n,):
            raise DimensionError(
                f"offset has shape {self.offset.shape}, expected ({n},)"
            )
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise DimensionError(
                f"design has shape {self.X.shape}, expected ({n}, p)"
            )
        _check_group("group1", self.group1, self.q1, n)
        if self.group2 is not None:
            _check_group("group2", self.group2, self.q2, n)
        elif self.q2:
            raise DimensionError("q2 > 0 without a second grouping map")
        for name in ("y", "offset", "X"):
            if not np.isfinite(getattr(self, name)).all():
                raise DimensionError(f"{name} contains missing values")
        if self.column_names and len(self.column_names) != self.p:
            raise DimensionError(
                f"{len(self.column_names)} column names for {self.p} columns"
            )

    @property
    def n_obs(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def n_factors(self) -> int:
        return 1 if self.group2 is None else 2


def _check_group(name: str, codes: np.ndarray, q: int, n: int) -> None:
    if codes.shape != (n,):
        raise DimensionError(
            f"{name} has shape {codes.shape}, expected ({n},)"
        )
    if not np.issubdtype(codes.dtype, np.integer):
        raise DimensionError(f"{name} must hold integer level codes")
    if q < 2:
        raise DimensionError(
            f"{name} needs at least 2 levels to identify a variance, got {q}"
        )
    if codes.min() < 0 or codes.max() >= q:
        raise DimensionError(f"{name} codes must lie in [0, {q})")


@dataclass(frozen=True, slots=True)
class ParamLayout:
    q1: int
    q2: int
    p: int
    r: int
    has_phi: bool

    @property
    def q(self) -> int:
        return self.q1 + self.q2

    @property
    def u1(self) -> slice:
        return slice(0, self.q1)

    @property
    def u2(self) -> slice:
        return slice(self.q1, self.q)

    @property
    def beta(self) -> slice:
        return slice(self.q, self.q + self.p)

    @property
    def log_sd(self) -> slice:
        start = self.q + self.p
        return slice(start, start + self.r)

    @property
    def log_phi(self) -> int | None:
        return self.q + self.p + self.r if self.has_phi else None

    @property
    def size(self) -> int:
        return self.q + self.p + self.r + int(self.has_phi)

    def random_index(self, include_beta: bool) -> np.ndarray:
        """Indices of the designated-random arguments w."""
        stop = self.q + self.p if include_beta else self.q
        return np.arange(stop)

    def nonrandom_index(self, include_beta: bool) -> np.ndarray:
        """Complement of `random_index`: [β,] log_sd [, log_phi]."""
        start = self.q + self.p if include_beta else self.q
        return np.arange(start, self.size)

    def variance_index(self) -> np.ndarray:
        """Indices of log_sd (and log_phi when estimated)."""
        return np.arange(self.q + self.p, self.size)


@dataclass
class ParamState:
    beta: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    log_sd: np.ndarray
    phi: float = 1.0

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sd)

    @classmethod
    def initial(cls, spec: "GlmmSpec", beta=None) -> "ParamState":
        lay = spec.layout
        return cls(
            beta=np.zeros(lay.p) if beta is None else np.asarray(beta, float),
            u1=np.zeros(lay.q1),
            u2=np.zeros(lay.q2),
            log_sd=np.zeros(lay.r),
        )

    def pack(self, layout: ParamLayout) -> np.ndarray:
        theta = np.empty(layout.size)
        theta[layout.u1] = self.u1
        theta[layout.u2] = self.u2
        theta[layout.beta] = self.beta
        theta[layout.log_sd] = self.log_sd
        if layout.has_phi:
            theta[layout.log_phi] = math.log(self.phi)
        return theta

    @classmethod
    def unpack(cls, layout: ParamLayout, theta: np.ndarray) -> "ParamState":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != layout.size:
            raise DimensionError(
                f"parameter vector of length {theta.size}, "
                f"expected {layout.size}"
            )
        phi = math.exp(theta[layout.log_phi]) if layout.has_phi else 1.0
        return cls(
            beta=theta[layout.beta].copy(),
            u1=theta[layout.u1].copy(),
            u2=theta[layout.u2].copy(),
            log_sd=theta[layout.log_sd].copy(),
            phi=phi,
        )


@dataclass(frozen=True)
class GlmmSpec:
    family: Family
    dataset: Dataset
    factor_structure: FactorStructure | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", Family.of(self.family))
        inferred = (
            FactorStructure.SINGLE
            if self.dataset.group2 is None
            else FactorStructure.CROSSED
        )
        if self.factor_structure is None:
            object.__setattr__(self, "factor_structure", inferred)
        elif FactorStructure(self.factor_structure) is not inferred:
            raise StructureError(
                f"factor structure {self.factor_structure} does not match "
                f"a dataset with {self.dataset.n_factors} grouping map(s)"
            )
        fam_mod.validate_response(self.family, self.dataset.y)

    @cached_property
    def layout(self) -> ParamLayout:
        d = self.dataset
        return ParamLayout(
            q1=d.q1,
            q2=d.q2,
            p=d.p,
            r=d.n_factors,
            has_phi=self.family.kind is FamilyKind.GAUSSIAN,
        )

    @cached_property
    def log_const(self) -> np.ndarray:
        return fam_mod.log_normalizer(self.family, self.dataset.y)

    @property
    def levels(self) -> list[int]:
        d = self.dataset
        return [d.q1] + ([d.q2] if d.q2 else [])


def _check_params(spec: GlmmSpec, params: ParamState) -> None:
    lay = spec.layout
    shapes = {
        "beta": (params.beta, lay.p),
        "u1": (params.u1, lay.q1),
        "u2": (params.u2, lay.q2),
        "log_sd": (params.log_sd, lay.r),
    }
    for name, (arr, want) in shapes.items():
        if np.shape(arr) != (want,):
            raise DimensionError(
                f"{name} has shape {np.shape(arr)}, expected ({want},)"
            )


def _eta_slice(spec: GlmmSpec, params: ParamState, a: int, b: int):
    d = spec.dataset
    eta = d.X[a:b] @ params.beta + params.u1[d.group1[a:b]] + d.offset[a:b]
    if d.group2 is not None:
        eta = eta + params.u2[d.group2[a:b]]
    return eta


def linear_predictor(spec: GlmmSpec, params: ParamState) -> np.ndarray:
    _check_params(spec, params)
    return _eta_slice(spec, params, 0, spec.dataset.n_obs)


def _prior_terms(u: np.ndarray, log_sd: float) -> float:
    """Σ log N(u_l; 0, σ²) with σ = exp(log_sd)."""
    return -0.5 * chunked_sum(u * u) * math.exp(-2.0 * log_sd) - u.size * (
        log_sd + 0.5 * _LOG_2PI
    )


def h_loglik(spec: GlmmSpec, params: ParamState, threads: int = 1) -> float:
    """Hierarchical log-likelihood with all normalizing constants.

    The observation sum is a fixed-chunk reduction; the value does not
    depend on `threads`.
    """
    _check_params(spec, params)
    d = spec.dataset
    const = spec.log_const

    def chunk(a: int, b: int) -> float:
        eta = _eta_slice(spec, params, a, b)
        with np.errstate(all="ignore"):
            terms = fam_mod.log_terms(
                spec.family, d.y[a:b], eta, params.phi, const[a:b]
            )
        bad = ~np.isfinite(terms)
        if bad.any():
            raise NonFiniteLikelihoodError(a + int(np.flatnonzero(bad)[0]))
        return float(np.sum(terms))

    data_part = parallel_chunked_sum(chunk, d.n_obs, threads)
    prior = [_prior_terms(params.u1, params.log_sd[0])]
    if d.group2 is not None:
        prior.append(_prior_terms(params.u2, params.log_sd[1]))
    value = math.fsum([data_part, *prior])
    if not math.isfinite(value):
        raise NonFiniteLikelihoodError(-1)
    return value


def h_expression(spec: GlmmSpec):
    """h as a function of the full parameter vector, recordable on a tape."""
    d = spec.dataset
    lay = spec.layout
    fam = spec.family
    const = spec.log_const
    idx_u1 = lay.u1.start + d.group1
    idx_u2 = None if d.group2 is None else lay.u2.start + d.group2
    factor_slices = [lay.u1] + ([lay.u2] if d.group2 is not None else [])

    def h(theta):
        eta = theta[idx_u1] + d.offset
        if lay.p:
            eta = eta + theta[lay.beta].matvec(d.X)
        if idx_u2 is not None:
            eta = eta + theta[idx_u2]
        phi = 1.0 if lay.log_phi is None else np.exp(theta[lay.log_phi])
        total = fam_mod.log_terms(fam, d.y, eta, phi, const).sum()
        for k, sl in enumerate(factor_slices):
            u = theta[sl]
            s = theta[lay.log_sd.start + k]
            quad = (u * u).sum() * np.exp(-2.0 * s)
            total = total - 0.5 * quad - (sl.stop - sl.start) * (
                s + 0.5 * _LOG_2PI
            )
        return total

    return h


def record_h(spec: GlmmSpec, theta0: np.ndarray) -> Tape:
    """Record h over the full parameter vector."""
    tape = record(h_expression(spec), theta0)
    log.debug(
        "h tape: %d nodes over %d parameters (N=%d)",
        len(tape.nodes),
        tape.input_count,
        spec.dataset.n_obs,
    )
    return tape


def glm_loglik(spec: GlmmSpec, beta: np.ndarray, phi: float = 1.0) -> float:
    """Log-likelihood with all random effects at zero."""
    d = spec.dataset
    eta = d.X @ beta + d.offset
    terms = fam_mod.log_terms(spec.family, d.y, eta, phi, spec.log_const)
    return chunked_sum(terms)
