"""
Run configuration of each CLI command. Unknown keys are rejected so a
mistyped setting fails before any computation starts.
"""

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.enums import FamilyKind, Grouping
from app.models.options import FitOptions, KnotSpec
from app.models.scenario import SimScenario


class _RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    threads: Optional[int] = Field(
        None, ge=1, description="Worker threads; default from HLIK_THREADS"
    )


class _ScenarioSource(_RunConfig):
    preset: Optional[str] = Field(
        None, description="Built-in scenario name (approximate names allowed)"
    )
    scenario: Optional[SimScenario] = None
    seed: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def one_source(self):
        if (self.preset is None) == (self.scenario is None):
            raise ValueError("give exactly one of preset or scenario")
        return self


class DataSource(_RunConfig):
    input: str = Field(..., description="Dataset CSV path")
    family: FamilyKind = FamilyKind.POISSON
    grouping: Grouping = Grouping.IP
    covariates: list[str] = Field(
        default_factory=list,
        description="Linear covariate columns; knotted ones become splines",
    )
    knots: dict[str, KnotSpec] = Field(default_factory=dict)
    intercept: bool = True


class FitConfig(DataSource):
    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "input": "data/sim.csv",
                "family": "poisson",
                "grouping": "ip+hcf",
                "covariates": ["age", "potassium", "egfr", "cci", "gender"],
                "knots": {
                    "potassium": {"boundary": [2, 8], "interior": [3, 5]}
                },
                "method": "HL11",
                "output": "fit.json",
            }
        }
    )

    method: str = Field("HL11", description="HL11, HL01, MLE, AGH<m>, AGH0")
    options: FitOptions = Field(default_factory=FitOptions)
    output: Optional[str] = None
    curves_output: Optional[str] = Field(
        None, description="CSV of fitted spline curves with 95% bands"
    )
    curve_points: int = Field(101, ge=2)


class SimulateConfig(_ScenarioSource):
    output: Optional[str] = None
    summary_output: Optional[str] = None


class StudyConfig(_ScenarioSource):
    methods: list[str] = Field(
        default_factory=lambda: ["HL11", "HL01", "AGH1"], min_length=1
    )
    n_replicates: int = Field(200, ge=2)
    seed: int = Field(1, ge=0)
    workers: int = Field(1, ge=1, description="Replicate worker processes")
    study_id: Optional[str] = Field(
        None, description="Checkpoint key; derived from the inputs if unset"
    )
    resume: bool = True
    options: FitOptions = Field(
        default_factory=lambda: FitOptions(compute_se=False)
    )
    output_csv: Optional[str] = None
    output_json: Optional[str] = None
    timings_csv: Optional[str] = None


class OracleConfig(DataSource):
    beta: Optional[list[float]] = Field(
        None, description="Evaluation point; fitted by `fit_method` if unset"
    )
    sigma: Optional[list[float]] = None
    phi: float = Field(1.0, gt=0)
    fit_method: str = "MLE"
    orders: list[int] = Field(default_factory=lambda: [1, 5, 9], min_length=1)
    oracle_order: int = Field(51, ge=1, le=101)
    output: Optional[str] = None

    @model_validator(mode="after")
    def point_complete(self):
        if (self.beta is None) != (self.sigma is None):
            raise ValueError("give both beta and sigma, or neither")
        return self


class BenchConfig(_ScenarioSource):
    sizes: list[int] = Field(
        default_factory=lambda: [100, 300, 1000], min_length=1
    )
    method: str = "HL11"
    grouping: Grouping = Grouping.IP
    thread_counts: list[int] = Field(default_factory=lambda: [1, 4])
    reduction_size: int = Field(1_000_000, ge=1)
    output: Optional[str] = None
