"""Exception hierarchy shared across the toolkit.

Every error carries the process exit code the CLI should terminate with,
so the command layer can stay a thin translation shell.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_REMOTE = 4
EXIT_CHECK_FAILED = 5


class RewardScopeError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(RewardScopeError):
    exit_code = EXIT_CONFIG


class DataError(RewardScopeError):
    """Dataset parsing or validation failure."""

    exit_code = EXIT_DATA


class EstimationError(RewardScopeError):
    exit_code = EXIT_DATA


class RemoteServiceError(RewardScopeError):
    """Transport-level failure talking to a rewriter or reward service."""

    exit_code = EXIT_REMOTE


class RewriteError(RemoteServiceError):
    pass


class RewriteRefusalError(RewriteError):
    """The rewriter answered with a refusal instead of a rewrite."""


class EmptyCompletionError(RewriteError):
    pass


class BatchRewriteError(RewriteError):
    """Raised when the failed fraction of a batch exceeds the threshold."""

    def __init__(self, message: str, failures: list[tuple[str, str]]):
        super().__init__(message)
        self.failures = failures


class ScoringError(RemoteServiceError):
    pass


class CheckFailedError(RewardScopeError):
    """A synthetic-mode statistical check did not hold."""

    exit_code = EXIT_CHECK_FAILED
