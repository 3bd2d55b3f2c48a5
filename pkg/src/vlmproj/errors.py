"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class ShapeError(ValidationError):
    """Tensor extents do not line up."""


class ContextOverflowError(ValidationError):
    """A sequence would exceed the model's context length."""


class TensorFormatError(OSError):
    """A TNSR file is malformed."""
