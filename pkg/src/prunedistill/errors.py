"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """An argument is outside its valid range."""


class DomainError(ValueError):
    """A mathematical function was evaluated outside its domain."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class FormatError(ValueError):
    """A binary file is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class RunError(RuntimeError):
    """A training stage failed (typically divergence)."""
