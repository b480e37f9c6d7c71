from typing import Optional

from pydantic import BaseModel, Field

from app.models.fit import SCHEMA_VERSION


class OracleRow(BaseModel):
    approximation: str = Field(..., description="LA, AGH(m) or oracle")
    order: Optional[int] = None
    loglik: Optional[float] = None
    delta: Optional[float] = Field(
        None, description="loglik minus the oracle value"
    )
    relative: Optional[float] = None
    note: str = ""


class OracleReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    levels: list[int]
    beta: list[float]
    sigma: list[float]
    phi: Optional[float] = None
    oracle_order: int
    rows: list[OracleRow] = Field(default_factory=list)


class BenchRow(BaseModel):
    kind: str = Field(..., description="fit or reduction")
    n_ip: Optional[int] = None
    n_obs: int
    threads: int = 1
    seconds: float
    tape_build: Optional[float] = None
    stage1: Optional[float] = None
    stage2: Optional[float] = None
    uncertainty: Optional[float] = None
    value: Optional[float] = None


class BenchReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    scenario: str
    method: str
    rows: list[BenchRow] = Field(default_factory=list)
    growth_exponent: Optional[float] = Field(
        None, description="Slope of log(seconds) on log(N) over the ladder"
    )
    reductions_identical: Optional[bool] = None
