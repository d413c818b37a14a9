"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage errors exit 1, data
errors exit 2, numeric failures exit 3.
"""


class GcapsError(Exception):
    """Base class for all package errors."""


class UsageError(GcapsError):
    """Bad command line, unknown config key, type mismatch, missing config."""


class DataError(GcapsError):
    """Unreadable or malformed input data (IDX files, checkpoints)."""


class NumericError(GcapsError):
    """Numeric failure: NaN loss during training or a failed gradient check."""
