"""Exception hierarchy shared across the pipeline."""
from __future__ import annotations


class WinnowError(Exception):
    """Base class for all package errors."""


class InputValidationError(WinnowError, ValueError):
    """A precondition on caller-supplied input was violated."""


class ConfigurationError(WinnowError):
    """Fatal misconfiguration, e.g. embedders disagreeing on dimension."""


class BackendError(WinnowError):
    """A model backend (chat or embedding) failed. Retryable by default."""

    retryable = True


class BackendUnavailableError(BackendError):
    """The backend could not be reached after exhausting retries."""

    retryable = False


class MalformedResponseError(BackendError):
    """The backend answered but the payload lacks the expected fields."""

    retryable = False


class ParseError(WinnowError):
    """Structured model output could not be parsed."""

    def __init__(self, message: str, raw: str = "") -> None:
        super().__init__(message)
        self.raw = raw


class DatasetError(WinnowError):
    """A dataset file is malformed. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DatasetError):
    """A dataset record is missing a required field or has the wrong type."""
