"""
Marginal log-likelihood comparison at one parameter point: Laplace,
AGH of several orders and a high-order quadrature oracle.
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np

from app.engine.laplace import laplace_marginal_loglik
from app.engine.model import GlmmSpec, ParamState
from app.engine.quadrature import agh_marginal_loglik, oracle_marginal_loglik
from app.errors import NumericalError, StructureError
from app.models.bench import OracleReport, OracleRow
from app.models.enums import FactorStructure
from app.models.options import FitOptions
from app.services.estimate_service import fit_label

log = logging.getLogger(__name__)


def _point(spec: GlmmSpec, beta, sigma, phi: float) -> ParamState:
    params = ParamState.initial(spec, beta)
    params.log_sd = np.log(np.asarray(sigma, dtype=np.float64))
    params.phi = phi
    return params


def compare(
    spec: GlmmSpec,
    beta: Optional[Sequence[float]] = None,
    sigma: Optional[Sequence[float]] = None,
    phi: float = 1.0,
    orders: Sequence[int] = (1, 5, 9),
    oracle_order: int = 51,
    fit_method: str = "MLE",
    grouping: str = "ip",
) -> OracleReport:
    """Evaluate every approximation at (β, σ); fit first if no point given."""
    if beta is None or sigma is None:
        opts = FitOptions(compute_se=False)
        res = fit_label(spec, fit_method, opts, grouping)
        beta, sigma = res.beta, [max(s, 1e-8) for s in res.sigma]
        phi = res.phi if res.phi is not None else phi
        log.info("oracle point from %s fit: sigma=%s", fit_method, sigma)
    if len(sigma) != spec.layout.r:
        raise StructureError(
            f"{len(sigma)} sigma values for {spec.layout.r} factor(s)"
        )
    params = _point(spec, beta, sigma, phi)
    single = spec.factor_structure is FactorStructure.SINGLE

    oracle = oracle_marginal_loglik(spec, beta, sigma, oracle_order, phi)
    rows = [
        OracleRow(approximation="oracle", order=oracle_order, loglik=oracle)
    ]

    def row(name: str, order: Optional[int], fn) -> OracleRow:
        try:
            value = float(fn())
        except (NumericalError, StructureError) as exc:
            return OracleRow(approximation=name, order=order, note=exc.detail)
        delta = value - oracle
        return OracleRow(
            approximation=name,
            order=order,
            loglik=value,
            delta=delta,
            relative=abs(delta) / max(abs(oracle), math.ulp(1.0)),
        )

    rows.append(row("LA", None, lambda: laplace_marginal_loglik(spec, params)))
    for m in orders:
        name = f"AGH({m})"
        if single:
            rows.append(
                row(
                    name,
                    m,
                    lambda m=m: agh_marginal_loglik(
                        spec, beta, sigma[0], m, phi
                    ),
                )
            )
        elif m == 1:
            rows.append(
                row(name, m, lambda: laplace_marginal_loglik(spec, params))
            )
        else:
            rows.append(
                OracleRow(
                    approximation=name,
                    order=m,
                    note="needs a single-factor model",
                )
            )
    return OracleReport(
        levels=spec.levels,
        beta=[float(b) for b in beta],
        sigma=[float(s) for s in sigma],
        phi=phi if spec.layout.has_phi else None,
        oracle_order=oracle_order,
        rows=rows,
    )
