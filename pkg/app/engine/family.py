"""
Exponential-family responses with canonical links.

`log_terms` is written against numpy ufuncs only, so the same expression
evaluates plain arrays and records onto an AD tape when `eta` (or `phi`)
is a `TapeVar`.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from app.errors import FamilyDomainError
from app.models.enums import FamilyKind

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, slots=True)
class Family:
    kind: FamilyKind

    @property
    def dispersion_known(self) -> bool:
        """Poisson and Bernoulli have φ fixed at 1."""
        return self.kind is not FamilyKind.GAUSSIAN

    @property
    def link(self) -> str:
        return _LINKS[self.kind]

    @classmethod
    def of(cls, kind: "FamilyKind | str | Family") -> "Family":
        if isinstance(kind, Family):
            return kind
        return cls(FamilyKind(kind))


_LINKS = {
    FamilyKind.POISSON: "log",
    FamilyKind.BERNOULLI: "logit",
    FamilyKind.GAUSSIAN: "identity",
}


def validate_response(fam: Family, y, phi: float = 1.0) -> np.ndarray:
    """Check the response domain and return y as float64."""
    y = np.asarray(y, dtype=np.float64)
    name = fam.kind.value
    bad = ~np.isfinite(y)
    if bad.any():
        raise FamilyDomainError(name, float(y[bad][0]), "not finite")
    if fam.kind is FamilyKind.POISSON:
        bad = (y < 0) | (y != np.floor(y))
        if bad.any():
            raise FamilyDomainError(
                name, float(y[bad][0]), "expected a nonnegative integer"
            )
    elif fam.kind is FamilyKind.BERNOULLI:
        bad = (y != 0) & (y != 1)
        if bad.any():
            raise FamilyDomainError(name, float(y[bad][0]), "expected 0 or 1")
    elif not (np.isfinite(phi) and phi > 0):
        raise FamilyDomainError(name, float(phi), "dispersion must be > 0")
    return y


def log_normalizer(fam: Family, y: np.ndarray) -> np.ndarray:
    """Terms of log f that depend on y only."""
    if fam.kind is FamilyKind.POISSON:
        return -gammaln(y + 1.0)
    return np.zeros_like(y)


def _softplus(eta):
    if isinstance(eta, np.ndarray) or np.isscalar(eta):
        return np.logaddexp(0.0, eta)
    return eta.softplus()


def log_terms(fam: Family, y: np.ndarray, eta, phi=1.0, const=None):
    """Elementwise log f(y | eta, phi).

    `const` is the precomputed `log_normalizer`; passing it keeps the
    y-only part out of any recorded graph.
    """
    if const is None:
        const = log_normalizer(fam, y)
    if fam.kind is FamilyKind.POISSON:
        return y * eta - np.exp(eta) + const
    if fam.kind is FamilyKind.BERNOULLI:
        return y * eta - _softplus(eta)
    resid = y - eta
    return -0.5 * (resid * resid) / phi - 0.5 * (np.log(phi) + _LOG_2PI)


def log_density(fam: Family, y, eta, phi: float = 1.0):
    """Exact log f(y | eta, phi), normalizing constants included."""
    fam = Family.of(fam)
    y_arr = validate_response(fam, y, phi)
    eta_arr = np.asarray(eta, dtype=np.float64)
    out = log_terms(fam, y_arr, eta_arr, phi)
    return float(out) if np.ndim(out) == 0 else out


def eta_derivatives(fam: Family, y, eta, phi: float = 1.0):
    """First and second derivatives of log f with respect to eta."""
    fam = Family.of(fam)
    y = validate_response(fam, y, phi)
    eta = np.asarray(eta, dtype=np.float64)
    if fam.kind is FamilyKind.POISSON:
        mu = np.exp(eta)
        d1, d2 = y - mu, -mu
    elif fam.kind is FamilyKind.BERNOULLI:
        p = expit(eta)
        d1, d2 = y - p, -p * (1.0 - p)
    else:
        d1 = (y - eta) / phi
        d2 = np.full_like(eta, -1.0 / phi)
    if np.ndim(d1) == 0:
        return float(d1), float(d2)
    return d1, np.broadcast_to(d2, np.shape(d1)).copy()


def mean(fam: Family, eta):
    """Inverse link."""
    fam = Family.of(fam)
    eta = np.asarray(eta, dtype=np.float64)
    if fam.kind is FamilyKind.POISSON:
        return np.exp(eta)
    if fam.kind is FamilyKind.BERNOULLI:
        return expit(eta)
    return eta
