"""Acousto-optic reconstruction of piecewise smooth absorption maps."""

from .fields import (
    BoundaryTrace,
    Grid,
    ScalarField,
    SolverError,
    VectorField,
)
from .phantom import Inclusion, Phantom

__version__ = "0.1.0"

__all__ = [
    "BoundaryTrace",
    "Grid",
    "Inclusion",
    "Phantom",
    "ScalarField",
    "SolverError",
    "VectorField",
    "__version__",
]
