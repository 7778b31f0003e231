"""Exception taxonomy shared across the package.

Validation-type errors map to exit status 1 on the command line,
numeric failures to exit status 2.
"""


class PaircastError(Exception):
    """Base class for all package errors."""


class ValidationError(PaircastError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValidationError):
    """A text input (CSV, map file) could not be parsed; message carries the line number."""


class ConfigError(ValidationError):
    """Run configuration is malformed or contains unknown keys."""


class DimensionError(ValidationError):
    """Tensor shapes are incompatible for the requested operation."""


class CheckpointError(ValidationError):
    """Checkpoint file is missing, corrupt, or version-incompatible."""


class NumericError(PaircastError):
    """A numeric failure (NaN/Inf loss, failed gradient check) occurred."""
