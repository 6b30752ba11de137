"""Exception hierarchy shared by every pvcgn module."""

from __future__ import annotations


class PvcgnError(Exception):
    """Base class for all library errors."""


class ParseError(PvcgnError):
    """A transaction file could not be parsed."""

    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RecordError(ParseError):
    """A parsed record violates a domain invariant (e.g. exit before entry)."""


class ConfigError(PvcgnError):
    """Invalid configuration value."""


class DegenerateDataError(PvcgnError):
    """Data cannot be normalized (zero variance, too few values)."""


class ArgumentError(PvcgnError, ValueError):
    """Invalid argument to a numerical routine."""


class NormalizationError(PvcgnError):
    """Row normalization hit a non-positive selected score."""


class ShapeError(PvcgnError, ValueError):
    """Array shapes are inconsistent."""


class NumericsError(PvcgnError, FloatingPointError):
    """A non-finite value appeared in a forward or backward computation."""


class EmptySliceError(PvcgnError):
    """An evaluation slice admitted no entries."""


class BaselineError(PvcgnError):
    """The historical-average baseline has no prior data for a query."""


class CheckpointError(PvcgnError):
    """A checkpoint file is malformed or does not match the supplied graphs."""
