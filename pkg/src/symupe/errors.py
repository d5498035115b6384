"""Exception types shared across the package."""


class SymupeError(Exception):
    """Base class for all domain errors raised by this package."""


class ParseError(SymupeError):
    """Malformed input file. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(SymupeError):
    """Input violates a documented invariant."""


class RangeError(SymupeError):
    """Value outside the supported feature range."""


class DecodeError(SymupeError):
    """Unknown token id or undecodable record."""


class NotInterpolatable(SymupeError):
    """A missing note cannot be filled from local performance data."""


class EmptySequence(SymupeError):
    """Operation requires at least one note."""


class DomainError(SymupeError):
    """Numeric argument outside its mathematical domain."""


class ShapeError(SymupeError):
    """Array arguments have inconsistent shapes or lengths."""


class SolverDiverged(SymupeError):
    """ODE integration produced a non-finite value."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
