from enum import Enum


class FamilyKind(str, Enum):
    """Response family. Values: poisson (log link), bernoulli (logit link),
    gaussian (identity link)."""

    POISSON = "poisson"
    BERNOULLI = "bernoulli"
    GAUSSIAN = "gaussian"


class Method(str, Enum):
    HL11 = "HL11"
    HL01 = "HL01"
    MLE = "MLE"
    AGH = "AGH"
    AGH0 = "AGH0"


class FactorStructure(str, Enum):
    SINGLE = "single"
    CROSSED = "crossed"


class Grouping(str, Enum):
    """Which grouping columns of a dataset enter as random intercepts."""

    IP = "ip"
    HCF = "hcf"
    BOTH = "ip+hcf"


class Crossing(str, Enum):
    NESTED = "Nested"
    PART_CROSSED = "PartCrossed"
    MORE_CROSSED = "MoreCrossed"


class OutcomeKind(str, Enum):
    POISSON_COUNTS = "PoissonCounts"
    BINARY = "Binary"


class Parameterization(str, Enum):
    LOG_SD = "log_sd"
    RAW_SD = "raw_sd"
