from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.enums import Parameterization


class KnotSpec(BaseModel):
    """Natural-spline knots for one covariate, in covariate units."""

    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {"boundary": [2.0, 8.0], "interior": [3.0, 5.0]}
        },
    )

    boundary: tuple[float, float]
    interior: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def ordered(self):
        lo, hi = self.boundary
        if not lo < hi:
            raise ValueError(
                f"boundary knots must satisfy lo < hi: {lo}, {hi}"
            )
        knots = self.interior
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ValueError("interior knots must be strictly increasing")
        if any(not lo < k < hi for k in knots):
            raise ValueError(
                "interior knots must lie strictly inside boundary"
            )
        return self


class FitOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    inner_tol: float = Field(1e-8, gt=0)
    inner_max_iter: int = Field(100, ge=1)
    outer_max_iter: int = Field(200, ge=1)
    outer_ftol: float = Field(
        1e-8, gt=0, description="Largest |Δobjective| of a converged run."
    )
    outer_gtol: float = Field(
        1e-5, gt=0, description="Largest gradient ∞-norm of a converged run."
    )
    outer_grad_step: float = Field(
        1e-5, gt=0, description="Central-difference step of outer gradients."
    )
    parameterization: Parameterization = Parameterization.LOG_SD
    se_step_log_sd: float = Field(1e-4, gt=0)
    se_step_beta: float = Field(1e-5, gt=0)
    boundary_sigma: float = Field(
        1e-4, ge=0, description="σ̂ below this is reported as 0."
    )
    compute_se: bool = True
    refine_random_effects: bool = False
    threads: Optional[int] = Field(None, ge=1)
