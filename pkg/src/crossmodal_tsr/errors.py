"""Exception taxonomy shared across the package."""


class CrossmodalError(Exception):
    """Base class for all package errors."""


class ShapeError(CrossmodalError, ValueError):
    """Operand extents do not satisfy an operation's shape contract."""


class ConfigError(CrossmodalError, ValueError):
    """Invalid configuration value (rates, fractions, sizes, flags)."""


class FormatError(CrossmodalError, ValueError):
    """A binary or text container violates its declared format."""


class ParseError(CrossmodalError, ValueError):
    """A line-oriented input failed to parse; carries the line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DataIOError(CrossmodalError, OSError):
    """I/O-level failure: missing file, truncated payload."""


class StateError(CrossmodalError, RuntimeError):
    """Operation invoked on an object in an unusable state."""


class DomainError(CrossmodalError, ValueError):
    """Mathematically undefined input (e.g. zero-norm vector for cosine)."""


class ContractError(CrossmodalError, ValueError):
    """Caller violated an API contract (e.g. backward on a non-scalar)."""


class NonFiniteError(CrossmodalError, ArithmeticError):
    """An operation produced NaN or Inf."""
