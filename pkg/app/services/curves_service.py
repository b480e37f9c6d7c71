"""
Fitted spline curves: each knotted covariate's contribution to the linear
predictor over its boundary range, with pointwise delta-method bands.
"""

import logging

import numpy as np
import pandas as pd
from scipy.stats import norm

from app.errors import ConfigError
from app.models.fit import FitResult
from app.models.options import KnotSpec
from app.services.ingest_service import spline_bases

log = logging.getLogger(__name__)


def spline_curves(
    fit: FitResult,
    knots: dict[str, KnotSpec] | None = None,
    points: int = 101,
    level: float = 0.95,
) -> pd.DataFrame:
    """One row per (covariate, grid point): fit, se, lower, upper."""
    knots = knots if knots is not None else fit.knots
    if fit.beta_cov is None:
        raise ConfigError("spline bands need a fit with standard errors")
    beta = np.asarray(fit.beta)
    cov = np.asarray(fit.beta_cov)
    z = norm.ppf(0.5 + level / 2.0)
    frames = []
    for name, basis in spline_bases(knots).items():
        cols = basis.column_names(name)
        try:
            idx = [fit.column_names.index(c) for c in cols]
        except ValueError as exc:
            raise ConfigError(
                f"fit has no spline columns for '{name}'"
            ) from exc
        lo, hi = basis.boundary_knots
        grid = np.linspace(lo, hi, points)
        B = basis.evaluate(grid)
        value = B @ beta[idx]
        se = np.sqrt(np.einsum("ij,jk,ik->i", B, cov[np.ix_(idx, idx)], B))
        frames.append(
            pd.DataFrame(
                {
                    "covariate": name,
                    "x": grid,
                    "fit": value,
                    "se": se,
                    "lower": value - z * se,
                    "upper": value + z * se,
                }
            )
        )
    if not frames:
        log.warning("no knotted covariates; no curves produced")
        return pd.DataFrame(
            columns=["covariate", "x", "fit", "se", "lower", "upper"]
        )
    return pd.concat(frames, ignore_index=True)
