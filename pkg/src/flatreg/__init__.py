"""Implicit regularization of label-noise SGD: regularizer, dynamics and coupling checks."""

__version__ = "0.1.0"

from . import coupling, dynamics, modelzoo, objective, regularizer, spectral  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError,
    DomainError,
    EdgeOfStability,
    FlatRegError,
    InsufficientSamples,
    InvalidP,
    NonSymmetric,
    NotPSD,
    StepTooLarge,
    TooLarge,
)

__all__ = [
    "__version__",
    "spectral",
    "modelzoo",
    "objective",
    "regularizer",
    "dynamics",
    "coupling",
    "FlatRegError",
    "NonSymmetric",
    "DomainError",
    "NotPSD",
    "StepTooLarge",
    "EdgeOfStability",
    "TooLarge",
    "InvalidP",
    "InsufficientSamples",
    "ConfigError",
]
