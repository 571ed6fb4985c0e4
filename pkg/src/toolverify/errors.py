"""Exception types shared across the package."""

from __future__ import annotations


class ToolVerifyError(Exception):
    """Base class for all package errors."""


class StrictFormatError(ToolVerifyError):
    def __init__(self, violation: str, offset: int, message: str = "") -> None:
        self.violation = violation
        self.offset = offset
        super().__init__(message or f"{violation} at byte offset {offset}")


class RenderError(ToolVerifyError):
    pass


class DuplicateIdError(ToolVerifyError):
    pass


class EmptyCorpusError(ToolVerifyError):
    pass


class RetrievalBackendError(ToolVerifyError):
    pass


class BackendTransportError(ToolVerifyError):
    pass


class ScriptExhaustedError(ToolVerifyError):
    pass


class UnknownTokenError(ToolVerifyError):
    pass


class LogitsUnavailableError(ToolVerifyError):
    pass


class ShapeMismatchError(ToolVerifyError):
    pass


class DegenerateGroupError(ToolVerifyError):
    pass


class BatchInfeasibleError(ToolVerifyError):
    pass


class NoAnswerableCandidateError(ToolVerifyError):
    pass


class ConfigError(ToolVerifyError):
    pass


class ResumeMismatchError(ToolVerifyError):
    pass
