"""Dimensional emotion regression from acoustic functionals and pooled embeddings."""
from .errors import (
    CcsqError,
    ConfigurationError,
    DegenerateStatisticsError,
    DivergenceError,
    RangeError,
    TooShortError,
    ValidationError,
)
from .kernels import BACKEND

__version__ = "0.1.0"
