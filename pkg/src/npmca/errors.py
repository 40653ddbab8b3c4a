"""Exception types shared across the package."""


class NpmcaError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(NpmcaError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(NpmcaError, ArithmeticError):
    """Non-finite values appeared where finite values are required."""


class GraphStateError(NpmcaError, RuntimeError):
    """Recording tape misuse, e.g. backward before any forward work."""


class ConfigError(NpmcaError, ValueError):
    """A configuration value violates its documented constraints."""


class FormatError(NpmcaError, ValueError):
    """A file does not follow its declared on-disk format.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
