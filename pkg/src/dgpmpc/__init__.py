"""Model-based RL with sparse deep Gaussian process dynamics and CEM model-predictive control."""

from dgpmpc.errors import ConfigError, InvalidArgumentError, InvalidStateError, NumericalFailureError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "InvalidArgumentError",
    "InvalidStateError",
    "NumericalFailureError",
]
