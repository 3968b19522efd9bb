"""Exception types raised across the package."""


class UwRectifyError(Exception):
    """Base class for all package errors."""


class TotalInternalReflection(UwRectifyError, ValueError):
    """Snell's equation has no real solution for the requested angle."""


class UnsupportedGeometry(UwRectifyError, ValueError):
    """Requested rectification needs information the model does not have."""


class InvalidSpec(UwRectifyError, ValueError):
    """Unknown or malformed procedural scene description."""


class DegenerateInput(UwRectifyError, ValueError):
    """An input reduces to zero where a division needs it nonzero."""


class DegenerateRatio(DegenerateInput):
    """A back-scatter or color-cast ratio has a zero denominator."""


class NonFiniteLoss(UwRectifyError, FloatingPointError):
    """Optimization produced a NaN or infinite loss.

    The optimizer state at the time of failure is attached so callers can
    inspect or persist it.
    """

    def __init__(self, message, iteration=None, state=None, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.state = state or {}
        self.trace = trace or []


class OutOfBounds(UwRectifyError, ValueError):
    """A parameter override falls outside its physical range."""


class ManifestError(UwRectifyError, ValueError):
    """Manifest file violates its schema."""
