"""Exception types shared across the package."""


class LccalError(Exception):
    """Base class for all package errors."""


class DegenerateInputError(LccalError, ValueError):
    """Input has no well-defined answer (zero-norm quaternion, empty cloud, ...)."""


class GimbalLockError(DegenerateInputError):
    """Euler decomposition requested too close to pitch = +-pi/2."""


class ValidationError(LccalError, ValueError):
    """Input violates a documented precondition."""


class ShapeError(LccalError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(LccalError, ValueError):
    """Invalid configuration value."""


class FormatError(LccalError, ValueError):
    """Malformed file contents."""


class CascadeError(LccalError, RuntimeError):
    """Refinement cascade could not complete."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage
