"""
Error taxonomy shared by every module.

Each error carries the process exit code the CLI reports for it.
"""


class CycleError(Exception):
    """Base class for all domain errors."""

    exit_code = 1


class ConfigError(CycleError):
    """Invalid configuration value or config file."""

    exit_code = 2


class SpecInfeasible(CycleError):
    """A synthetic spec that cannot be realised (e.g. more classes than dimensions)."""

    exit_code = 2


class InputFormatError(CycleError):
    """Malformed bundle or checkpoint input."""

    exit_code = 4


class BadMagic(InputFormatError):
    pass


class UnsupportedVersion(InputFormatError):
    pass


class DimensionMismatch(InputFormatError):
    pass


class NonFiniteValue(InputFormatError):
    pass


class MalformedMetadata(InputFormatError):
    """Bundle metadata that is not a UTF-8 JSON object."""


class NumericalError(CycleError):
    exit_code = 4


class NearZeroNorm(NumericalError):
    """A vector that should be normalized has a norm below eps."""


class NonPositiveTemperature(NumericalError):
    pass


class EmptyAnchorSet(CycleError):
    exit_code = 4


class EmptyQuerySet(CycleError):
    exit_code = 4


class MissingClassSupport(CycleError):
    exit_code = 4


class DivergenceDetected(CycleError):
    """
    Training produced a non-finite loss.

    Attributes:
        history: TrainHistory recorded up to (excluding) the failing epoch.
        params: ModelParams at the failing epoch.
    """

    exit_code = 3

    def __init__(self, message: str, history=None, params=None) -> None:
        super().__init__(message)
        self.history = history
        self.params = params


class IoFailure(CycleError):
    exit_code = 5
