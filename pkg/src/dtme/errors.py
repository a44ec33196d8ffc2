"""Exception types shared across the package."""


class DTMEError(Exception):
    """Base class for all package errors."""


class ShapeError(DTMEError, ValueError):
    """Raised when operand extents are incompatible."""


class ContractError(DTMEError, RuntimeError):
    """Raised when a call violates an operation's preconditions."""


class NumericError(DTMEError, ArithmeticError):
    """Raised when a computation produces NaN/Inf or leaves its tolerance band."""


class ValidationError(DTMEError, ValueError):
    """Raised for malformed configs, specs and on-disk artifacts."""
