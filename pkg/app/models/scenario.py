from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.enums import Crossing, OutcomeKind
from app.models.fit import SCHEMA_VERSION
from app.models.options import KnotSpec


def _default_knots() -> dict[str, KnotSpec]:
    return {
        "age": KnotSpec(boundary=(18.0, 100.0), interior=[50.0, 66.0]),
        "potassium": KnotSpec(boundary=(2.0, 8.0), interior=[3.0, 5.0]),
        "egfr": KnotSpec(boundary=(15.0, 120.0), interior=[50.0, 90.0]),
    }


class CovariateParams(BaseModel):
    """Distributions of the simulated patient covariates."""

    model_config = ConfigDict(extra="forbid")

    mu_age: float = 58.0
    sigma_age: float = Field(12.0, gt=0)
    m_age: float = 18.0
    M_age: float = 100.0
    mu_K: float = 4.1
    sigma_K: float = Field(1.0, gt=0)
    m_K: float = 2.0
    M_K: float = 8.0
    p_k: float = Field(
        0.05, gt=0, description="Per-visit K SD as a fraction of K_j"
    )
    mu_eGFR: float = 82.0
    sigma_eGFR: float = Field(28.0, gt=0)
    m_eGFR: float = 15.0
    M_eGFR: float = 120.0
    p_gender: float = Field(0.44, ge=0, le=1)
    mu_CCI: float = Field(0.98, gt=0)
    phi_CCI: float = Field(0.55, gt=0, description="NB size of CCI")
    m_CCI: int = Field(0, ge=0)
    M_CCI: int = 29
    mu_LOS: float = -0.1483469
    sigma_LOS: float = Field(1.413642, gt=0)

    @model_validator(mode="after")
    def bounds_ordered(self):
        for name in ("age", "K", "eGFR", "CCI"):
            lo, hi = getattr(self, f"m_{name}"), getattr(self, f"M_{name}")
            if not lo < hi:
                raise ValueError(f"m_{name} must be < M_{name}: {lo}, {hi}")
        return self


class Coefficients(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    intercept: float = Field(-4.5, alias="beta0")
    age: list[float] = Field(default_factory=lambda: [1.0, 2.0, 1.5])
    potassium: list[float] = Field(default_factory=lambda: [1.5, -1.1, 2.2])
    egfr: list[float] = Field(default_factory=lambda: [1.0, 0.2, 0.12])
    cci: float = 0.15
    gender: float = 0.26


class SimScenario(BaseModel):
    """One synthetic EHR design: structure, covariates and outcome model."""

    model_config = ConfigDict(
        extra="forbid",
        populate_by_name=True,
        json_schema_extra={
            "example": {
                "name": "poisson-nested-100x5",
                "N_IP": 100,
                "N_HCF": 5,
                "crossing": "Nested",
                "outcome": "PoissonCounts",
                "lambda_f": 0.25,
                "m_f": 0.0,
                "M_f": 1.1,
                "beta": {"beta0": -4.5},
                "sigma_IP": 1.0,
                "sigma_HCF": 0.5,
                "seed": 1,
            }
        },
    )

    name: Optional[str] = None
    n_ip: int = Field(..., alias="N_IP", ge=1)
    n_hcf: int = Field(..., alias="N_HCF", ge=1)
    crossing: Crossing
    outcome: OutcomeKind = OutcomeKind.POISSON_COUNTS

    mu_v: float = Field(7.74, gt=0, description="NB mean of visits per IP")
    phi_v: float = Field(0.575, gt=0, description="NB size of visits per IP")
    m_v: int = Field(1, ge=0)
    M_v: int = 10
    lambda_f: float = Field(..., gt=0, description="Poisson rate of HCF/IP")
    m_f: float = 0.0
    M_f: float
    mu_alpha: float = 3.0
    sigma_alpha: float = Field(0.2, gt=0)

    covariates: CovariateParams = Field(default_factory=CovariateParams)
    knots: dict[str, KnotSpec] = Field(default_factory=_default_knots)
    beta: Coefficients = Field(default_factory=Coefficients)
    sigma_ip: float = Field(1.0, alias="sigma_IP", gt=0)
    sigma_hcf: float = Field(0.5, alias="sigma_HCF", gt=0)
    seed: int = Field(0, ge=0)
    include_los_offset: bool = Field(
        True, description="Add log(LOS) to the Poisson linear predictor"
    )

    @model_validator(mode="after")
    def bounds_ordered(self):
        if not self.m_v < self.M_v:
            raise ValueError(f"m_v must be < M_v: {self.m_v}, {self.M_v}")
        if not self.m_f < self.M_f:
            raise ValueError(f"m_f must be < M_f: {self.m_f}, {self.M_f}")
        if self.M_f < 1:
            raise ValueError("M_f must admit at least one facility per IP")
        missing = {"age", "potassium", "egfr"} - set(self.knots)
        if self.outcome is OutcomeKind.POISSON_COUNTS and missing:
            raise ValueError(f"knots missing for {sorted(missing)}")
        return self

    @property
    def label(self) -> str:
        return self.name or (
            f"{self.outcome.value}-{self.crossing.value}-"
            f"{self.n_ip}x{self.n_hcf}"
        )


class Spread(BaseModel):
    """Median and interquartile range of a count distribution."""

    median: float
    iqr: float


class StructureSummary(BaseModel):
    schema_version: str = SCHEMA_VERSION
    scenario: str
    n_obs: int
    n_ip: int
    n_hcf: int
    visits_per_ip: Spread
    hcf_per_ip: Spread
    visits_per_hcf: Spread
    ip_per_hcf: Spread
    event_rate: Optional[float] = None
