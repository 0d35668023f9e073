"""Exception types shared across the package."""


class SurroflowError(Exception):
    """Base class for all package errors."""


class GeometryError(SurroflowError):
    """Raised when a layer or grid geometry is inconsistent or impossible."""


class ArchitectureError(SurroflowError):
    """Raised when a network configuration cannot be realised."""


class DataError(SurroflowError):
    """Raised for malformed, missing, or corrupted data artifacts."""


class NumericalError(SurroflowError):
    """Raised when an iterative numerical procedure fails to converge."""


class ConfigError(SurroflowError):
    """Raised for invalid run configurations or option combinations."""
