from app.models.bench import BenchReport, BenchRow, OracleReport, OracleRow
from app.models.config import (
    BenchConfig,
    FitConfig,
    OracleConfig,
    SimulateConfig,
    StudyConfig,
)
from app.models.enums import (
    Crossing,
    FactorStructure,
    FamilyKind,
    Grouping,
    Method,
    OutcomeKind,
    Parameterization,
)
from app.models.fit import FitResult, StageDiagnostics, StageTimings
from app.models.options import FitOptions, KnotSpec
from app.models.scenario import (
    Coefficients,
    CovariateParams,
    SimScenario,
    Spread,
    StructureSummary,
)
from app.models.study import (
    MethodSummary,
    MetricRow,
    StudyReport,
    TimingRow,
)

__all__ = [
    "Crossing",
    "FactorStructure",
    "FamilyKind",
    "Grouping",
    "Method",
    "OutcomeKind",
    "Parameterization",
    "FitOptions",
    "KnotSpec",
    "FitResult",
    "StageDiagnostics",
    "StageTimings",
    "CovariateParams",
    "Coefficients",
    "SimScenario",
    "Spread",
    "StructureSummary",
    "MetricRow",
    "MethodSummary",
    "TimingRow",
    "StudyReport",
    "OracleRow",
    "OracleReport",
    "BenchRow",
    "BenchReport",
    "FitConfig",
    "SimulateConfig",
    "StudyConfig",
    "OracleConfig",
    "BenchConfig",
]
