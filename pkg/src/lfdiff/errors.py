"""Exception hierarchy shared across the package."""


class LfdiffError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(LfdiffError, ValueError):
    pass


class PointOutsideDomainError(LfdiffError, ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class ConductivityPositivityError(LfdiffError, ValueError):
    pass


class DimensionError(LfdiffError, ValueError):
    pass


class NumericalError(LfdiffError, RuntimeError):
    """Failure of a numerical routine (solver, overflow, divergence)."""


class SolverError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class ParameterOverflowError(NumericalError):
    pass


class IllConditionedPriorError(NumericalError):
    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.jitter = jitter


class DivergenceError(NumericalError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class SimulationError(NumericalError):
    pass


class ConfigError(LfdiffError, ValueError):
    pass
