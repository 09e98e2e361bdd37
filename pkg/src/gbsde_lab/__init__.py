"""Numerical toolkit for BSDEs driven by G-Brownian motion."""
from .errors import (
    ConfigurationError,
    DomainError,
    GeneratorEvaluationError,
    GLabError,
    ParseError,
    SchemeError,
    ShapeError,
    StateOverflowError,
)
from .sublinear import (
    NodeFunction,
    ScenarioLattice,
    VolatilityBounds,
    build_lattice,
    cond_g_expectation,
    g_expectation,
    g_scalar,
)

__version__ = "0.1.0"
