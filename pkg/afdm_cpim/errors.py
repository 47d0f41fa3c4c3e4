"""Error taxonomy.

Each error also derives from the closest builtin so callers that only know
``ValueError`` or ``IndexError`` keep working.
"""


class CpimError(Exception):
    """Base class for every error raised by afdm_cpim."""


class InvalidDimensionError(CpimError, ValueError):
    pass


class InvalidPermutationError(CpimError, ValueError):
    pass


class PermutationIndexError(CpimError, IndexError):
    pass


class InvalidDelayError(CpimError, ValueError):
    pass


class SamplerError(CpimError, ValueError):
    pass


class UnsupportedConstellationError(CpimError, ValueError):
    pass


class ConfigError(CpimError, ValueError):
    pass


class BudgetExceededError(CpimError, RuntimeError):
    pass


class NumericalError(CpimError, ArithmeticError):
    def __init__(self, message: str, condition_number: float | None = None) -> None:
        super().__init__(message)
        self.condition_number = condition_number


class SimulationError(CpimError, RuntimeError):
    pass
