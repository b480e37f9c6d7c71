from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from app.models.fit import SCHEMA_VERSION


class MetricRow(BaseModel):
    """Error metrics of one parameter under one method."""

    method: str
    parameter: str
    truth: float
    mean: Optional[float] = None
    std_bias: Optional[float] = Field(
        None, description="100·|mean − truth| / empirical SD, in percent"
    )
    std_bias_infinite: bool = Field(
        False, description="Zero spread with nonzero bias"
    )
    mse: Optional[float] = None
    n: int = 0


class MethodSummary(BaseModel):
    method: str
    replicates: int
    failures: int
    time_median: Optional[float] = None
    time_iqr: Optional[float] = None
    boundary_fraction: Optional[float] = Field(
        None, description="Share of σ estimates reported at 0"
    )


class TimingRow(BaseModel):
    method: str
    replicate: int
    seconds: float
    tape_build: float = 0.0
    stage1: float = 0.0
    stage2: float = 0.0
    uncertainty: float = 0.0


class StudyReport(BaseModel):
    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "schema_version": SCHEMA_VERSION,
                "scenario": "poisson-nested-100x5",
                "seed": 7,
                "n_replicates": 10,
                "methods": ["HL11", "HL01", "AGH1"],
                "metrics": [
                    {
                        "method": "HL11",
                        "parameter": "sigma_ip",
                        "truth": 1.0,
                        "mean": 0.97,
                        "std_bias": 12.4,
                        "mse": 0.05,
                        "n": 10,
                    }
                ],
            }
        }
    )

    schema_version: str = SCHEMA_VERSION
    scenario: str
    seed: int
    n_replicates: int
    methods: list[str]
    metrics: list[MetricRow] = Field(default_factory=list)
    summaries: list[MethodSummary] = Field(default_factory=list)
    timings: list[TimingRow] = Field(default_factory=list)
