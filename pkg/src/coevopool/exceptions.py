"""Exception hierarchy shared across the package."""


class CoevoError(Exception):
    """Base class for all package errors."""


class ConfigError(CoevoError, ValueError):
    """Invalid run configuration or parameters."""


class StateError(CoevoError):
    """Pool state does not satisfy an operation's precondition."""


class SnapshotError(CoevoError):
    """A pool snapshot could not be decoded."""


class BackendError(CoevoError):
    """An agent backbone or embedding call failed."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class GradingError(CoevoError):
    """A grader could not produce a reward."""


class StreamError(CoevoError):
    """A task stream or event log could not be read."""
