"""DP adversarial training with fixed perturbed batches, parameter-server training and verified inference."""

from .errors import (ConfigError, ConsistencyError, DegenerateParamError, DivergenceError, FormatError,
                     IncompleteRoundError, PrivacyViolationError, RangeError, ShapeError, StaleGradientError,
                     StoBatchError)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConsistencyError", "DegenerateParamError", "DivergenceError", "FormatError",
    "IncompleteRoundError", "PrivacyViolationError", "RangeError", "ShapeError", "StaleGradientError",
    "StoBatchError", "__version__",
]
