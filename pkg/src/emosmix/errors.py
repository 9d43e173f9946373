"""Exception types shared across the package."""


class EmosError(Exception):
    """Base class for all package errors."""


class IntegrationError(EmosError):
    """Numerical integration failed to converge."""


class QuantileError(EmosError):
    """Quantile root search failed to converge."""


class InfeasibleLinkError(EmosError, ValueError):
    """Coefficients map an ensemble to invalid distribution parameters."""


class InsufficientHistoryError(EmosError):
    """Not enough training data precedes a verification date."""


class DataFormatError(EmosError, ValueError):
    """A data or configuration file could not be parsed."""
