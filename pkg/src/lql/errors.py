"""Exception hierarchy shared by every module."""


class LqlError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LqlError, ValueError):
    """Invalid grid, parameter set or experiment configuration."""


class DomainError(LqlError, ValueError):
    """An argument lies outside the region where an operation is defined."""


class NumericalError(LqlError, ArithmeticError):
    """Overflow or a failed linear solve."""


class NoPathError(DomainError):
    """The endpoints are disconnected inside the requested region."""


class EmptyRenewalError(LqlError, RuntimeError):
    """No coalescence point was detected, so no renewal structure exists."""


class InsufficientDataError(LqlError, ValueError):
    """Too few observations for the requested statistic."""


class UndefinedStatisticError(LqlError, ValueError):
    """Statistic is undefined for the data (zero variance, zero denominator)."""


class ResolutionError(DomainError):
    """The lattice is too coarse to resolve the requested geometry."""


class SupportError(DomainError):
    """A test function violates its support requirement."""
