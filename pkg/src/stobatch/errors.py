"""Exception hierarchy shared by every stobatch module."""


class StoBatchError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(StoBatchError, ValueError):
    """A configuration value violates its documented precondition."""


class FormatError(StoBatchError):
    """A binary file does not follow the expected container format."""


class ConsistencyError(StoBatchError):
    """Two inputs that must agree (counts, labels, alignments) do not."""


class RangeError(StoBatchError, ValueError):
    """A numeric input falls outside its admissible range."""


class ShapeError(StoBatchError, ValueError):
    """Array shapes do not chain as required."""


class PrivacyViolationError(StoBatchError):
    """An operation would break an assumption of the privacy analysis."""


class DegenerateParamError(StoBatchError):
    """Parameters make a derived quantity undefined (e.g. an all-zero encoder)."""


class DivergenceError(StoBatchError):
    """Training produced a non-finite loss."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class StaleGradientError(StoBatchError):
    """A gradient message carries a step tag other than the server's current step."""


class IncompleteRoundError(StoBatchError):
    """A synchronous round ended without a message from every selected trainer."""
