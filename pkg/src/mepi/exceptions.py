"""Exception types raised by the estimation routines."""


class MEPIError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MEPIError, ValueError):
    pass


class NonFiniteCenterError(MEPIError, ValueError):
    """A center function returned a non-finite value."""

    def __init__(self, w, z):
        self.w = w
        self.z = z
        super().__init__(f"center is not finite at w={w!r}, z={z!r}")


class BracketError(MEPIError, RuntimeError):
    """No sign change found for a root finder, even after a grid scan."""

    def __init__(self, message, scanned=None):
        self.scanned = scanned
        super().__init__(message)


class ConvergenceError(MEPIError, RuntimeError):
    def __init__(self, message, trace=None):
        self.trace = trace or []
        super().__init__(message)


class SingularMatrixError(MEPIError, RuntimeError):
    def __init__(self, message, condition=float("nan")):
        self.condition = condition
        super().__init__(f"{message} (condition estimate {condition:.3e})")


class IllConditionedError(SingularMatrixError):
    """A Fredholm linear system could not be solved to the residual tolerance."""


class QuadratureError(MEPIError, RuntimeError):
    pass
