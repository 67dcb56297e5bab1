"""Exception types shared across the package."""


class HdrfError(Exception):
    """Base class for all package errors."""


class ShapeError(HdrfError):
    """Operand shapes do not conform to an operation's rules."""


class NumericError(HdrfError):
    """A computation produced (or received) NaN or infinity."""


class DomainError(HdrfError):
    """Input outside an operation's mathematical domain (e.g. log of <= 0)."""


class InputError(HdrfError):
    """Invalid argument or malformed user-supplied data."""


class FormatError(HdrfError):
    """Malformed or unsupported file contents."""


class SolveError(HdrfError):
    """A linear solve failed (rank deficiency, no usable data)."""


class DegenerateError(HdrfError):
    """A distribution or system degenerated to an unusable state."""


class DeterminismError(HdrfError):
    """Two evaluations that must agree produced different results."""


class TapeReuseError(HdrfError):
    """Backward was invoked more than once on the same tape."""
