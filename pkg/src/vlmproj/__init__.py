"""Projector zoo and toy vision-language pipeline in float64 numpy."""

from .errors import ContextOverflowError, ShapeError, TensorFormatError, ValidationError
from .projector import (
    VARIANTS,
    Projector,
    ProjectorSpec,
    build,
    closed_form_param_count,
    format_millions,
    param_count,
)

__all__ = [
    "VARIANTS",
    "ContextOverflowError",
    "Projector",
    "ProjectorSpec",
    "ShapeError",
    "TensorFormatError",
    "ValidationError",
    "build",
    "closed_form_param_count",
    "format_millions",
    "param_count",
]

__version__ = "0.1.0"
