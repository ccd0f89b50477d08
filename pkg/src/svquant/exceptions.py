"""Exception hierarchy shared across the package."""


class SVQuantError(Exception):
    """Base class for all package errors."""


class DimensionError(SVQuantError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(SVQuantError, ValueError):
    """An invalid hyper-parameter or configuration value."""


class UsageError(SVQuantError, RuntimeError):
    """An API was called in an invalid state (e.g. backward on a consumed graph)."""


class NonFiniteError(SVQuantError, ArithmeticError):
    """A forward operation produced NaN or Inf."""


class CorruptionError(SVQuantError, ValueError):
    """A packed model file is malformed or fails its checksum."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDivergedError(SVQuantError, RuntimeError):
    """Training produced a non-finite loss or a collapsed clipping value."""


class SigmaFloorWarning(UserWarning):
    """A standard deviation was zero and has been floored to a small constant."""
