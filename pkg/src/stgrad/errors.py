"""Exception taxonomy shared across the package."""


class StgradError(Exception):
    """Base class for all package errors."""


class DomainError(StgradError, ValueError):
    """Numeric input outside the function's domain (non-finite, out of range)."""


class ConfigError(StgradError, ValueError):
    """Invalid configuration value (temperature, eta, estimator kind, ...)."""


class GuardError(StgradError, ValueError):
    """Enumeration oracle refused: problem size over the guard limit."""


class NumericsError(StgradError, ArithmeticError):
    """Non-finite value encountered where finiteness is required (training abort)."""


class UndefinedCosineError(StgradError, ArithmeticError):
    """Cosine similarity is undefined because the reference gradient is zero."""


class DataError(StgradError):
    """Base class for dataset / file format errors."""


class IdxFormatError(DataError):
    """IDX file has an unrecognised magic number or malformed header."""


class IdxTruncatedError(DataError):
    """IDX payload shorter or longer than the header promises."""


class IdxDimensionError(DataError):
    """IDX dimension sizes are implausible or overflow the payload size."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt or structurally invalid."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class MetricsWriterError(DataError):
    """Metrics CSV misuse, e.g. a second concurrent writer on the same path."""
