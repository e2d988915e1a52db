"""Reduced density matrices from pole-expanded bath correlations.

The package solves the open-system dynamics of a discrete-level system
linearly coupled to Gaussian reservoirs by closing the Kraus-operator
hierarchy in the Laplace domain and resumming it, either as a matrix
continued fraction or as a fixed point over the finite family of shifted
arguments the pole structure generates.  Time-domain oracles (exact
diagonalization against discretized baths, Volterra iteration of the same
hierarchy, direct Dyson resummation) cross-check every production path.
"""

__version__ = "0.1.0"

from .core import (
    CheckReport,
    DensityMatrix,
    LaplacePoint,
    MultiIndex,
    SystemSpec,
    TransitionIndex,
    free_propagate,
    psd_trace_check,
    validate_system,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateArgumentError,
    KrausCFError,
    ValidationError,
)

__all__ = [
    "CheckReport",
    "ConfigError",
    "ConvergenceError",
    "DegenerateArgumentError",
    "DensityMatrix",
    "KrausCFError",
    "LaplacePoint",
    "MultiIndex",
    "SystemSpec",
    "TransitionIndex",
    "ValidationError",
    "__version__",
    "free_propagate",
    "psd_trace_check",
    "validate_system",
]
