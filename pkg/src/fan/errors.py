"""Exception types shared across the package."""


class FanError(Exception):
    """Base class for all package errors."""


class DimensionError(FanError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(FanError, ValueError):
    """A model, block or run configuration is inconsistent."""


class ProbeError(FanError, ArithmeticError):
    """A numerical probe produced a non-finite value."""


class DecompositionError(FanError, ArithmeticError):
    """A matrix factorization failed (e.g. covariance not SPD)."""


class DegenerateSpectrumError(FanError, ArithmeticError):
    """The affinity spectrum has no positive eigenvalue."""


class ContractError(FanError, ValueError):
    """An input violates a documented precondition."""


class SpecError(FanError, KeyError):
    """Unknown corruption kind or severity."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class UndefinedCEError(FanError, ZeroDivisionError):
    """Baseline error for a corruption kind sums to zero."""


class TrainingDiverged(FanError, RuntimeError):
    """Loss became non-finite; carries the last good parameters."""

    def __init__(self, message, last_good=None, epoch=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch
