"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data and
format problems exit 2, numerical faults exit 3.
"""


class UqsrError(Exception):
    """Base class for all package errors."""


class DimensionError(UqsrError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class GeometryError(UqsrError, ValueError):
    """Patch/volume geometry does not admit the requested operation."""


class FormatError(UqsrError, ValueError):
    """Malformed on-disk data. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(UqsrError, ValueError):
    """A documented precondition of an operation was violated."""


class StateError(UqsrError, RuntimeError):
    """Operation invoked in an invalid object state."""


class NumericalFault(UqsrError, ArithmeticError):
    """NaN/Inf divergence or other numerical breakdown."""
