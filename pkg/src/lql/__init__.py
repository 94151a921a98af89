"""Lattice laboratory for LQG geodesics: fields, metrics, renewal decompositions,
rooted environments and their diagnostics."""

from .errors import (
    ConfigurationError,
    DomainError,
    EmptyRenewalError,
    InsufficientDataError,
    LqlError,
    NoPathError,
    NumericalError,
    ResolutionError,
    SupportError,
    UndefinedStatisticError,
)
from .field import GridSpec, LatticeField, sample_gff
from .metric import DEFAULT_PARAMS, LqgParams, MetricField, build_metric, shortest_path

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DomainError",
    "EmptyRenewalError",
    "InsufficientDataError",
    "LqlError",
    "NoPathError",
    "NumericalError",
    "ResolutionError",
    "SupportError",
    "UndefinedStatisticError",
    "GridSpec",
    "LatticeField",
    "sample_gff",
    "DEFAULT_PARAMS",
    "LqgParams",
    "MetricField",
    "build_metric",
    "shortest_path",
]
