"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class MPSQError(Exception):
    exit_code = 3


class ConfigError(MPSQError):
    exit_code = 1


class ModelError(MPSQError):
    exit_code = 2


class SpectralRadiusError(ModelError):
    pass


class SingularError(ModelError):
    pass


class InvalidScale(ModelError):
    pass


class NotCritical(ModelError):
    pass


class NumericError(MPSQError):
    exit_code = 3


class GridMismatch(NumericError):
    pass


class NonConvergence(NumericError):
    pass


class NotIncreasing(NumericError):
    pass


class MassDeficit(NumericError):
    pass


class NegativeWorkload(NumericError):
    pass


class HorizonTooShort(NumericError):
    pass


class CapExceeded(MPSQError):
    exit_code = 4


class EventCapExceeded(CapExceeded):
    pass


class RouteCapExceeded(CapExceeded):
    pass


class TruncationWarning(UserWarning):
    """Mass beyond the grid end is not negligible."""
