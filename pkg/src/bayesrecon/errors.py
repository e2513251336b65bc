"""Exception types shared across the package.

The CLI maps these onto exit codes: validation/shape problems exit 1,
numerical failures exit 2, I/O and file-format problems exit 3.
"""


class ReconError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(ReconError, ValueError):
    """An argument is outside its documented domain."""


class ShapeError(ValidationError):
    """Array extents are inconsistent with each other."""


class NumericalError(ReconError, ArithmeticError):
    """A computation produced non-finite values or broke down."""

    exit_code = 2


class FormatError(ReconError, IOError):
    """A file on disk is truncated, corrupted or of the wrong kind."""

    exit_code = 3
