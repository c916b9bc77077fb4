"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor or parameter shapes do not fit together."""


class ValidationError(ValueError):
    """A model, dataset or config is well-formed but inconsistent."""


class ModelFormatError(ValueError):
    """A model container could not be parsed.

    ``offset`` is the byte offset at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericalError(RuntimeError):
    """A computation produced NaN or Inf where finite values are required."""
