"""Exception hierarchy shared by every hypersde module."""


class Error(Exception):
    pass


class HyperSdeValueError(Error, ValueError):
    """Raised when arguments fail a basic sanity check."""
    pass


class DimensionError(HyperSdeValueError):
    """Raised when array shapes do not conform."""
    pass


class ConvergenceError(Error):
    """Raised when an iterative solver stops before meeting its tolerance.

    The last measured residual is kept on the instance so callers can
    decide whether the result is still usable.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ControllabilityError(Error):
    """Raised when a pair (A, B) is not controllable where it must be."""

    def __init__(self, message, rank=None):
        super().__init__(message)
        self.rank = rank


class DivergenceError(Error):
    """Raised when too many Monte Carlo paths blow up."""
    pass


class NonFiniteSampleError(Error):
    """Raised when a Monte Carlo sample is NaN or infinite."""

    def __init__(self, message, path_index=None):
        super().__init__(message)
        self.path_index = path_index
