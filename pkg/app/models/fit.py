from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from app.models.enums import FamilyKind, Method
from app.models.options import KnotSpec

SCHEMA_VERSION = "1.0"


class StageDiagnostics(BaseModel):
    stage: str
    iterations: int = 0
    evaluations: int = 0
    inner_iterations: int = 0
    inner_failures: int = 0
    grad_norm: Optional[float] = None
    objective: Optional[float] = None
    converged: bool = True
    message: str = ""


class StageTimings(BaseModel):
    """Wall-clock seconds per fitting stage."""

    tape_build: float = 0.0
    stage1: float = 0.0
    stage2: float = 0.0
    uncertainty: float = 0.0
    total: float = 0.0


class FitResult(BaseModel):
    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "schema_version": SCHEMA_VERSION,
                "method": "HL11",
                "family": "poisson",
                "n_obs": 20,
                "levels": [5],
                "beta": [-1.02],
                "se_beta": [0.31],
                "sigma": [0.74],
                "se_sigma": [0.29],
            }
        }
    )

    schema_version: str = SCHEMA_VERSION
    method: str = Field(..., description="HL11, HL01, MLE, AGH(m) or AGH0")
    method_kind: Method
    agh_order: Optional[int] = None
    family: FamilyKind
    grouping: str = "ip"
    n_obs: int
    levels: list[int]
    column_names: list[str] = Field(default_factory=list)
    beta: list[float]
    se_beta: list[Optional[float]]
    beta_cov: Optional[list[list[float]]] = None
    sigma: list[float]
    se_sigma: list[Optional[float]]
    sigma_boundary: list[bool]
    phi: Optional[float] = None
    u: list[list[float]] = Field(
        default_factory=list,
        description="Random-effect predictions per factor",
    )
    u_refined: bool = False
    objective: dict[str, float] = Field(default_factory=dict)
    diagnostics: list[StageDiagnostics] = Field(default_factory=list)
    timings: StageTimings = Field(default_factory=StageTimings)
    knots: dict[str, KnotSpec] = Field(default_factory=dict)
