"""Exception hierarchy and CLI exit-code mapping."""

from __future__ import annotations


class DemandcastError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(DemandcastError):
    """Invalid configuration: unknown dialect, bad polygon, bad option values."""


class DataQualityError(DemandcastError):
    """Input data is unusable, e.g. too many malformed rows."""

    def __init__(self, message: str, *, counts: dict | None = None):
        super().__init__(message)
        self.counts = counts or {}


class ContractViolationError(DemandcastError):
    """A documented precondition was violated (shape mismatch, asymmetry, ...)."""


class OutOfGridError(DemandcastError):
    """Point does not fall in any cell of the grid."""


class OutOfRangeError(DemandcastError):
    """Timestamp before the slot epoch."""


class InsufficientHistoryError(DemandcastError):
    """Not enough preceding slots to build the feature window."""


class NoTargetError(DemandcastError):
    """Prediction slot t+1 lies outside the demand tensor."""


class UndefinedMetricError(DemandcastError):
    """Metric requested over an empty prediction set."""


class NumericalFailureError(DemandcastError):
    """NaN/Inf encountered during training or a forward pass."""

    def __init__(self, message: str, *, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(DemandcastError):
    """Base class for checkpoint load/save failures."""


class CorruptCheckpointError(CheckpointError):
    """File is unreadable, truncated, or has an unknown version."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint dimensions or region vocabulary do not match expectations."""


# CLI exit codes: 0 success, 1 usage/config, 2 data, 3 numerical failure,
# 4 acceptance thresholds not met (e2e only).
EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
EXIT_THRESHOLDS = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(exc, NumericalFailureError):
        return EXIT_NUMERICAL
    if isinstance(exc, (DemandcastError, OSError)):
        return EXIT_DATA
    return EXIT_CONFIG
