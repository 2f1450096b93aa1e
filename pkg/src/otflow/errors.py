"""Exception types shared across the package."""


class OTFlowError(Exception):
    """Base class for all errors raised by this package."""


class GridMismatchError(OTFlowError):
    """Two fields or series that must share a grid do not."""


class OutsideDomainError(OTFlowError):
    """A point lies outside the closed grid domain."""


class ConjugateGradientError(OTFlowError):
    """CG failed to reach the requested residual within the iteration cap."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class EmptySeedsError(OTFlowError):
    """Seeding produced no points."""


class ConfigError(OTFlowError):
    """A run configuration is missing, malformed, or carries unknown keys."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class VolumeFormatError(OTFlowError):
    """Base class for problems with a volume file."""


class HeaderError(VolumeFormatError):
    """Volume header is malformed or unsupported."""


class BadMagicError(VolumeFormatError):
    """File is not a single-file NIfTI-1 volume."""


class UnsupportedDatatypeError(VolumeFormatError):
    """Volume stores a datatype this reader does not handle."""


class TruncatedDataError(VolumeFormatError):
    """Volume data section is shorter than the header promises."""
