"""Stochastic-projection ensembles for bitwise neural networks, with a
bit-exact model of a multiplexer-based hardware stochastic rounder."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    DiscreteModelInstance,
    LayerKind,
    LayerSpec,
    ModelFormatError,
    NetworkModel,
    ProjectionMode,
    QFraction,
    SignMagnitudeWeight,
    clip,
    load_model,
    store_model,
    to_sign_magnitude,
)
from .projection import RandomSource, expected_projection, project_binary, project_ternary, sround  # noqa: F401
