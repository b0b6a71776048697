"""Control of a coupled hyperbolic PDE / stochastic ODE plant through the
PDE boundary: backstepping kernels, delay tracking, reduction to a
multi-input delayed SDE, covariance floors and controllers."""

from .errors import (ControllabilityError, ConvergenceError, DimensionError,
                     DivergenceError, Error, HyperSdeValueError,
                     NonFiniteSampleError)

__version__ = '0.1.0'
