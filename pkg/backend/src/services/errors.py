class DiffKGError(Exception):
    """Base class for every error raised by the reasoning engine."""


class DataError(DiffKGError, ValueError):
    """Malformed input, unresolvable names, out-of-range indices, manifest mismatches."""


class NumericError(DiffKGError, ArithmeticError):
    """Non-finite values or a failed gradient check."""


class UsageError(DiffKGError, ValueError):
    """Inconsistent configuration or flag combination."""
