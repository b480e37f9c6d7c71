"""
Natural cubic spline bases with fixed knots.

Construction: cubic B-splines on the boundary knots (each repeated four
times) plus the interior knots; the first column is dropped (the model
carries its own intercept), and the remaining columns are projected onto
the null space of the second derivatives at both boundary knots. Outside
the boundary each function continues along its tangent line.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import qr

from app.errors import KnotError

_ORDER = 4


@dataclass(frozen=True)
class SplineBasis:
    boundary_knots: tuple[float, float]
    interior_knots: tuple[float, ...]
    _bspline: BSpline = field(repr=False, compare=False)
    _projection: np.ndarray = field(repr=False, compare=False)

    @property
    def dimension(self) -> int:
        return len(self.interior_knots) + 1

    def _raw(self, x: np.ndarray, nu: int = 0) -> np.ndarray:
        spline = self._bspline if nu == 0 else self._bspline.derivative(nu)
        return spline(x)[:, 1:]

    def evaluate(self, x) -> np.ndarray:
        """Basis values, shape (len(x), dimension)."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        lo, hi = self.boundary_knots
        out = np.empty((x.size, self._raw(np.array([lo])).shape[1]))
        inside = (x >= lo) & (x <= hi)
        if inside.any():
            out[inside] = self._raw(x[inside])
        for edge, mask in ((lo, x < lo), (hi, x > hi)):
            if mask.any():
                at = np.array([edge])
                value = self._raw(at)
                slope = self._raw(at, nu=1)
                out[mask] = value + (x[mask] - edge)[:, None] * slope
        return out @ self._projection

    def column_names(self, prefix: str) -> list[str]:
        return [f"{prefix}_ns{k + 1}" for k in range(self.dimension)]


def build_basis(
    boundary: tuple[float, float], interior: list[float] | tuple = ()
) -> SplineBasis:
    lo, hi = (float(b) for b in boundary)
    knots = tuple(float(k) for k in interior)
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise KnotError(f"boundary knots must satisfy lo < hi, got {boundary}")
    if any(b <= a for a, b in zip(knots, knots[1:])):
        raise KnotError(f"interior knots must be strictly increasing: {knots}")
    if any(not lo < k < hi for k in knots):
        raise KnotError(
            f"interior knots {knots} must lie strictly inside ({lo}, {hi})"
        )

    t = np.concatenate([[lo] * _ORDER, knots, [hi] * _ORDER])
    n_coef = t.size - _ORDER
    spline = BSpline(t, np.eye(n_coef), _ORDER - 1, extrapolate=True)
    constraint = spline.derivative(2)(np.array([lo, hi]))[:, 1:]
    q, _ = qr(constraint.T, mode="full")
    return SplineBasis(
        boundary_knots=(lo, hi),
        interior_knots=knots,
        _bspline=spline,
        _projection=q[:, 2:],
    )


def evaluate(basis: SplineBasis, x) -> np.ndarray:
    return basis.evaluate(x)
