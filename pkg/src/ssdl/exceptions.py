"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of the supplied operands do not line up."""


class StructureError(ValueError):
    """A group structure does not satisfy the requirements of an operation."""


class FormatError(ValueError):
    """A file does not conform to the expected on-disk format.

    ``offset`` is the byte offset at which the problem was detected, or
    ``None`` when the problem is not tied to a specific position.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ArithmeticError):
    """A numerical computation failed to produce a usable result."""


class ConditioningError(NumericError):
    """A linear system was too ill-conditioned (or singular) to factor."""
