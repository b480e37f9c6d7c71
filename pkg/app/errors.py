"""
Error hierarchy. Every error carries the process exit code the CLI
returns when it escapes a command: 1 config, 2 data, 3 numerical.
"""


class HlikError(Exception):
    exit_code = 3

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


# ── Configuration (exit 1) ───────────────────────────────────────────────────


class ConfigError(HlikError):
    exit_code = 1


class KnotError(ConfigError):
    pass


class StructureError(ConfigError):
    """Method not applicable to the model's random-effect structure."""


class InfeasibleTruncationError(ConfigError):
    """Rejection sampler exhausted its draw budget."""


# ── Data (exit 2) ────────────────────────────────────────────────────────────


class DataError(HlikError):
    exit_code = 2


class FamilyDomainError(DataError):
    def __init__(self, family: str, value: float, reason: str):
        super().__init__(f"{family}: invalid value {value!r} ({reason})")
        self.family = family
        self.value = value


class DimensionError(DataError):
    pass


# ── Numerical (exit 3) ───────────────────────────────────────────────────────


class NumericalError(HlikError):
    exit_code = 3


class UnsupportedOperationError(NumericalError):
    def __init__(self, operation: str):
        super().__init__(f"unsupported operation on tape: {operation}")
        self.operation = operation


class TapeEvaluationError(NumericalError):
    def __init__(self, node_index: int, kind: str):
        super().__init__(
            f"non-finite value at tape node {node_index} ({kind})"
        )
        self.node_index = node_index


class PatternMismatchError(NumericalError):
    pass


class NonFiniteLikelihoodError(NumericalError):
    def __init__(self, observation: int):
        super().__init__(
            f"non-finite h-likelihood contribution at observation "
            f"{observation}"
        )
        self.observation = observation


class InnerSolveError(NumericalError):
    def __init__(self, detail: str, grad_norm: float | None = None):
        super().__init__(detail)
        self.grad_norm = grad_norm


class OuterConvergenceError(NumericalError):
    def __init__(self, detail: str, diagnostics: dict | None = None):
        super().__init__(detail)
        self.diagnostics = diagnostics or {}


class StandardErrorError(NumericalError):
    pass


class QuadratureError(NumericalError):
    pass
