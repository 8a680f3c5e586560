"""Exception types raised by camnoise."""


class CamnoiseError(Exception):
    """Base class for all camnoise errors."""


class FormatError(CamnoiseError, ValueError):
    """A file is truncated, has a bad magic/version, or an inconsistent payload."""


class DimensionMismatchError(CamnoiseError, ValueError):
    pass


class NumericalError(CamnoiseError, FloatingPointError):
    """A fit produced a non-finite objective value."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
