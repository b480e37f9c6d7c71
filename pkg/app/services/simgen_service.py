"""
Seeded generation of synthetic partially-crossed EHR datasets.

Every draw comes from a PCG64 stream keyed by (seed, stage, unit):

    stage 0  facility weights α              unit 0
    stage 1  visits, facilities, allocation  unit = IP index
    stage 2  patient covariates              unit = IP index
    stage 3  random effects                  unit 0 (IP), 1 (HCF)
    stage 4  outcomes                        unit 0

so each stage is reproducible on its own and per-IP work can run in any
order. Within a stream the draw order is the order of the statements
below.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import truncnorm

from app.errors import ConfigError, InfeasibleTruncationError
from app.models.enums import OutcomeKind
from app.models.scenario import SimScenario, Spread, StructureSummary
from app.services.ingest_service import expand_design
from app.utils.reduction import ordered_map

log = logging.getLogger(__name__)

MAX_REJECTION_DRAWS = 1_000_000
_BATCH = 16

_STAGE_WEIGHTS = 0
_STAGE_STRUCTURE = 1
_STAGE_COVARIATES = 2
_STAGE_EFFECTS = 3
_STAGE_OUTCOMES = 4

SIM_COVARIATES = ["age", "potassium", "egfr", "cci", "gender"]
SPLINE_COVARIATES = ("age", "potassium", "egfr")


def stream(seed: int, stage: int, unit: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(stage, unit))
    return np.random.Generator(np.random.PCG64(ss))


# ── Truncated samplers ───────────────────────────────────────────────────────


def _rejection(
    draw: Callable[[int], np.ndarray],
    accept: Callable[[np.ndarray], np.ndarray],
    what: str,
) -> int:
    drawn = 0
    while drawn < MAX_REJECTION_DRAWS:
        batch = draw(_BATCH)
        drawn += _BATCH
        ok = np.flatnonzero(accept(batch))
        if ok.size:
            return int(batch[ok[0]])
    raise InfeasibleTruncationError(
        f"infeasible truncation: {what} accepted nothing in "
        f"{MAX_REJECTION_DRAWS} draws"
    )


def truncated_nbinom(
    rng: np.random.Generator, mu: float, size: float, lo: int, hi: int
) -> int:
    """NB(mean mu, size) conditioned on lo <= k <= hi."""
    p = size / (size + mu)
    return _rejection(
        lambda n: rng.negative_binomial(size, p, n),
        lambda k: (k >= lo) & (k <= hi),
        f"NB({mu}, {size}) on [{lo}, {hi}]",
    )


def truncated_facility_count(
    rng: np.random.Generator, lam: float, lo: float, hi: float, cap: int
) -> int:
    """Poisson(lam) conditioned on lo < k <= hi, k >= 1 and k <= cap."""
    return _rejection(
        lambda n: rng.poisson(lam, n),
        lambda k: (k > lo) & (k <= hi) & (k >= 1) & (k <= cap),
        f"Poisson({lam}) on ({lo}, {hi}]",
    )


def truncated_normal(
    rng: np.random.Generator, mu: float, sd: float, lo: float, hi: float
) -> float:
    a, b = (lo - mu) / sd, (hi - mu) / sd
    return float(truncnorm.rvs(a, b, loc=mu, scale=sd, random_state=rng))


def visit_potassium(
    rng: np.random.Generator, k_patient: float, p_k: float, size: int
) -> np.ndarray:
    return rng.normal(k_patient, p_k * k_patient, size)


# ── Structure ────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class SimStructure:
    """Visits per IP and the (IP, HCF, visit count) cells, IP-major."""

    n_ip: int
    n_hcf: int
    visits: np.ndarray
    cell_ip: np.ndarray
    cell_hcf: np.ndarray
    cell_count: np.ndarray

    @property
    def obs_ip(self) -> np.ndarray:
        return np.repeat(self.cell_ip, self.cell_count)

    @property
    def obs_hcf(self) -> np.ndarray:
        return np.repeat(self.cell_hcf, self.cell_count)

    @property
    def n_obs(self) -> int:
        return int(self.cell_count.sum())


def _patient_structure(scenario: SimScenario, seed: int, alpha, j: int):
    rng = stream(seed, _STAGE_STRUCTURE, j)
    s = scenario
    n_visits = truncated_nbinom(rng, s.mu_v, s.phi_v, s.m_v, s.M_v)
    n_fac = truncated_facility_count(rng, s.lambda_f, s.m_f, s.M_f, s.n_hcf)
    chosen = np.sort(rng.choice(s.n_hcf, size=n_fac, replace=False))
    p = alpha[chosen] / alpha[chosen].sum()
    counts = rng.multinomial(n_visits, p)
    keep = counts > 0
    return n_visits, chosen[keep], counts[keep]


def gen_structure(
    scenario: SimScenario, seed: int | None = None, threads: int = 1
) -> SimStructure:
    seed = scenario.seed if seed is None else seed
    alpha = stream(seed, _STAGE_WEIGHTS).lognormal(
        scenario.mu_alpha, scenario.sigma_alpha, scenario.n_hcf
    )
    per_ip = ordered_map(
        lambda j: _patient_structure(scenario, seed, alpha, j),
        range(scenario.n_ip),
        threads,
    )
    visits = np.array([v for v, _f, _c in per_ip], dtype=np.int64)
    sizes = [f.size for _v, f, _c in per_ip]
    return SimStructure(
        n_ip=scenario.n_ip,
        n_hcf=scenario.n_hcf,
        visits=visits,
        cell_ip=np.repeat(np.arange(scenario.n_ip), sizes),
        cell_hcf=np.concatenate([f for _v, f, _c in per_ip]).astype(np.int64),
        cell_count=np.concatenate([c for _v, _f, c in per_ip]).astype(
            np.int64
        ),
    )


# ── Covariates ───────────────────────────────────────────────────────────────


def _patient_covariates(scenario: SimScenario, seed: int, j: int, n: int):
    c = scenario.covariates
    rng = stream(seed, _STAGE_COVARIATES, j)
    age = truncated_normal(rng, c.mu_age, c.sigma_age, c.m_age, c.M_age)
    k_j = truncated_normal(rng, c.mu_K, c.sigma_K, c.m_K, c.M_K)
    egfr = truncated_normal(
        rng, c.mu_eGFR, c.sigma_eGFR, c.m_eGFR, c.M_eGFR
    )
    gender = int(rng.binomial(1, c.p_gender))
    cci = truncated_nbinom(rng, c.mu_CCI, c.phi_CCI, c.m_CCI, c.M_CCI)
    potassium = visit_potassium(rng, k_j, c.p_k, n)
    los = rng.lognormal(c.mu_LOS, c.sigma_LOS, n)
    return {
        "age": np.full(n, age),
        "potassium_ip": np.full(n, k_j),
        "potassium": potassium,
        "egfr": np.full(n, egfr),
        "cci": np.full(n, cci, dtype=np.int64),
        "gender": np.full(n, gender, dtype=np.int64),
        "los": los,
    }


def gen_covariates(
    structure: SimStructure,
    scenario: SimScenario,
    seed: int | None = None,
    threads: int = 1,
) -> pd.DataFrame:
    """Observation-level covariates in the row order of the structure."""
    seed = scenario.seed if seed is None else seed
    per_ip = ordered_map(
        lambda j: _patient_covariates(
            scenario, seed, j, int(structure.visits[j])
        ),
        range(structure.n_ip),
        threads,
    )
    columns = {
        key: np.concatenate([block[key] for block in per_ip])
        for key in per_ip[0]
    }
    return pd.DataFrame(columns)


# ── Outcomes ─────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class SimTruth:
    beta: np.ndarray
    sigma: np.ndarray
    u_ip: np.ndarray
    u_hcf: np.ndarray


def _random_effects(scenario: SimScenario, seed: int):
    u_ip = stream(seed, _STAGE_EFFECTS, 0).normal(
        0.0, scenario.sigma_ip, scenario.n_ip
    )
    u_hcf = stream(seed, _STAGE_EFFECTS, 1).normal(
        0.0, scenario.sigma_hcf, scenario.n_hcf
    )
    return u_ip, u_hcf


def poisson_coefficients(scenario: SimScenario) -> np.ndarray:
    b = scenario.beta
    for name in SPLINE_COVARIATES:
        want = scenario.knots[name].interior
        if len(getattr(b, name)) != len(want) + 1:
            raise ConfigError(
                f"{name}: {len(getattr(b, name))} coefficients for a "
                f"spline basis of dimension {len(want) + 1}"
            )
    return np.array(
        [b.intercept, *b.age, *b.potassium, *b.egfr, b.cci, b.gender]
    )


def truncated_poisson_event_probability(eta) -> np.ndarray:
    """P(Y = 1 | Y <= 1) for Y ~ Poisson(exp(eta)): λ/(1+λ)."""
    return expit(eta)


def gen_poisson_outcomes(
    frame: pd.DataFrame,
    structure: SimStructure,
    scenario: SimScenario,
    seed: int | None = None,
) -> tuple[np.ndarray, SimTruth]:
    seed = scenario.seed if seed is None else seed
    knots = {k: scenario.knots[k] for k in SPLINE_COVARIATES}
    X, _names = expand_design(frame, SIM_COVARIATES, knots)
    beta = poisson_coefficients(scenario)
    u_ip, u_hcf = _random_effects(scenario, seed)
    eta = X @ beta + u_ip[structure.obs_ip] + u_hcf[structure.obs_hcf]
    if scenario.include_los_offset:
        eta = eta + np.log(frame["los"].to_numpy())
    p = truncated_poisson_event_probability(eta)
    y = stream(seed, _STAGE_OUTCOMES).random(eta.size) < p
    truth = SimTruth(
        beta=beta,
        sigma=np.array([scenario.sigma_ip, scenario.sigma_hcf]),
        u_ip=u_ip,
        u_hcf=u_hcf,
    )
    return y.astype(np.int64), truth


def gen_binary_outcomes(
    structure: SimStructure, scenario: SimScenario, seed: int | None = None
) -> tuple[np.ndarray, SimTruth]:
    seed = scenario.seed if seed is None else seed
    u_ip, u_hcf = _random_effects(scenario, seed)
    b0 = scenario.beta.intercept
    eta = b0 + u_ip[structure.obs_ip] + u_hcf[structure.obs_hcf]
    y = stream(seed, _STAGE_OUTCOMES).random(eta.size) < expit(eta)
    truth = SimTruth(
        beta=np.array([b0]),
        sigma=np.array([scenario.sigma_ip, scenario.sigma_hcf]),
        u_ip=u_ip,
        u_hcf=u_hcf,
    )
    return y.astype(np.int64), truth


# ── Assembly ─────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class SimDataset:
    scenario: SimScenario
    frame: pd.DataFrame
    structure: SimStructure
    truth: SimTruth

    @property
    def covariates(self) -> list[str]:
        if self.scenario.outcome is OutcomeKind.POISSON_COUNTS:
            return list(SIM_COVARIATES)
        return []

    @property
    def knots(self):
        if self.scenario.outcome is OutcomeKind.POISSON_COUNTS:
            return {k: self.scenario.knots[k] for k in SPLINE_COVARIATES}
        return {}


def simulate(
    scenario: SimScenario, seed: int | None = None, threads: int = 1
) -> SimDataset:
    """Structure, covariates and outcomes of one dataset in CSV layout."""
    seed = scenario.seed if seed is None else seed
    structure = gen_structure(scenario, seed, threads)
    frame = pd.DataFrame(
        {
            "ip_id": structure.obs_ip + 1,
            "hcf_id": structure.obs_hcf + 1,
        }
    )
    if scenario.outcome is OutcomeKind.POISSON_COUNTS:
        cov = gen_covariates(structure, scenario, seed, threads)
        y, truth = gen_poisson_outcomes(cov, structure, scenario, seed)
        offset = (
            np.log(cov["los"].to_numpy())
            if scenario.include_los_offset
            else np.zeros(len(cov))
        )
        frame["y"] = y
        frame["log_offset"] = offset
        for name in SIM_COVARIATES:
            frame[name] = cov[name].to_numpy()
    else:
        y, truth = gen_binary_outcomes(structure, scenario, seed)
        frame["y"] = y
        frame["log_offset"] = 0.0
    log.info(
        "simulated %s seed=%d: N=%d event_rate=%.4f",
        scenario.label,
        seed,
        len(frame),
        float(np.mean(y)) if len(y) else 0.0,
    )
    return SimDataset(scenario, frame, structure, truth)


def _spread(values) -> Spread:
    values = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return Spread(median=float(med), iqr=float(q3 - q1))


def summarize_structure(
    frame: pd.DataFrame, name: str = ""
) -> StructureSummary:
    """Visit and crossing distributions of a dataset in CSV layout."""
    by_ip = frame.groupby("ip_id")
    by_hcf = frame.groupby("hcf_id")
    event_rate = float(frame["y"].mean()) if "y" in frame else None
    return StructureSummary(
        scenario=name,
        n_obs=len(frame),
        n_ip=by_ip.ngroups,
        n_hcf=by_hcf.ngroups,
        visits_per_ip=_spread(by_ip.size()),
        hcf_per_ip=_spread(by_ip["hcf_id"].nunique()),
        visits_per_hcf=_spread(by_hcf.size()),
        ip_per_hcf=_spread(by_hcf["ip_id"].nunique()),
        event_rate=event_rate,
    )
