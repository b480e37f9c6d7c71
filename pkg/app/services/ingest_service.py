"""
Dataset CSV ingestion.

Layout: one row per observation with the columns `ip_id, hcf_id, y,
log_offset` followed by covariate columns. Covariates with a knot set are
expanded into natural-spline columns here; the CSV never stores the
expanded design.
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from app.engine.family import Family
from app.engine.model import Dataset, GlmmSpec
from app.engine.splines import SplineBasis, build_basis
from app.errors import ConfigError, DataError
from app.models.enums import FamilyKind, Grouping
from app.models.options import KnotSpec

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("ip_id", "hcf_id", "y", "log_offset")

_GROUP_COLUMNS = {
    Grouping.IP: ("ip_id",),
    Grouping.HCF: ("hcf_id",),
    Grouping.BOTH: ("ip_id", "hcf_id"),
}


def read_dataset(path: str | Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {path}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    log.info("read %d rows from %s", len(frame), path)
    return frame


def write_dataset(frame: pd.DataFrame, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8")
    log.info("wrote %d rows to %s", len(frame), path)


def _numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors="coerce").to_numpy(float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DataError(
            f"column '{column}' has a missing or non-numeric value "
            f"at row {int(bad[0]) + 1}"
        )
    return values


def spline_bases(knots: dict[str, KnotSpec]) -> dict[str, SplineBasis]:
    return {
        name: build_basis(k.boundary, k.interior) for name, k in knots.items()
    }


def expand_design(
    frame: pd.DataFrame,
    covariates: list[str],
    knots: dict[str, KnotSpec],
    intercept: bool = True,
) -> tuple[np.ndarray, list[str]]:
    """Fixed-effect design: intercept, then each covariate in order."""
    unknown = sorted(set(knots) - set(covariates))
    if unknown:
        raise ConfigError(f"knots given for unused covariates {unknown}")
    missing = [c for c in covariates if c not in frame.columns]
    if missing:
        raise DataError(f"missing covariate columns {missing}")
    bases = spline_bases(knots)
    blocks: list[np.ndarray] = []
    names: list[str] = []
    if intercept:
        blocks.append(np.ones((len(frame), 1)))
        names.append("intercept")
    for cov in covariates:
        x = _numeric(frame, cov)
        if cov in bases:
            blocks.append(bases[cov].evaluate(x))
            names.extend(bases[cov].column_names(cov))
        else:
            blocks.append(x[:, None])
            names.append(cov)
    X = np.hstack(blocks) if blocks else np.empty((len(frame), 0))
    return X, names


def build_dataset(
    frame: pd.DataFrame,
    grouping: Grouping | str = Grouping.IP,
    covariates: list[str] | None = None,
    knots: dict[str, KnotSpec] | None = None,
    intercept: bool = True,
) -> Dataset:
    if frame.empty:
        raise DataError("dataset has no rows")
    grouping = Grouping(grouping)
    X, names = expand_design(frame, covariates or [], knots or {}, intercept)
    codes: list[np.ndarray] = []
    labels: list[tuple] = []
    for col in _GROUP_COLUMNS[grouping]:
        if frame[col].isna().any():
            raise DataError(f"column '{col}' has missing group ids")
        c, uniques = pd.factorize(frame[col], sort=True)
        codes.append(c.astype(np.int64))
        labels.append(tuple(uniques.tolist()))
    two = len(codes) == 2
    return Dataset(
        y=_numeric(frame, "y"),
        offset=_numeric(frame, "log_offset"),
        X=X,
        group1=codes[0],
        q1=len(labels[0]),
        group2=codes[1] if two else None,
        q2=len(labels[1]) if two else 0,
        column_names=tuple(names),
        level_labels=tuple(labels),
    )


def build_spec(
    frame: pd.DataFrame,
    family: FamilyKind | str,
    grouping: Grouping | str = Grouping.IP,
    covariates: list[str] | None = None,
    knots: dict[str, KnotSpec] | None = None,
    intercept: bool = True,
) -> GlmmSpec:
    dataset = build_dataset(frame, grouping, covariates, knots, intercept)
    spec = GlmmSpec(Family.of(family), dataset)
    log.info(
        "dataset: N=%d p=%d levels=%s grouping=%s",
        dataset.n_obs,
        dataset.p,
        spec.levels,
        Grouping(grouping).value,
    )
    return spec
