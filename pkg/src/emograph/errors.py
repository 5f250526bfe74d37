"""Exception types shared across the package."""


class EmographError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EmographError):
    """Operand shapes do not conform."""


class ParseError(EmographError):
    """A data file line is malformed, out of range, or mis-shaped."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class UnknownConceptError(EmographError):
    """A concept has no usable embedding and no fallback was enabled."""


class NumericError(EmographError):
    """A numeric result is not finite, or a numeric precondition failed."""
