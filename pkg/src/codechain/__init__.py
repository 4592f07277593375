"""Pseudo-labeling for multivariate time series built on coarse/fine
code transition matrices, exact-transport channel alignment, and
tempered Bayesian aggregation."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CodechainError,
    ConfigError,
    DataError,
    InternalError,
    ParseError,
)
