"""Reverse Markov learning: multi-step generative models from energy-score steps."""

from rml.errors import (
    CapabilityError,
    ConfigurationError,
    InsufficientSamplesError,
    NonFiniteError,
    RmlError,
    TrainingDivergence,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "CapabilityError",
    "ConfigurationError",
    "InsufficientSamplesError",
    "NonFiniteError",
    "RmlError",
    "TrainingDivergence",
    "UsageError",
    "__version__",
]
