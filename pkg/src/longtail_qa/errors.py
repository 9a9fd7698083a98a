"""Shared exception types."""


class OracleError(RuntimeError):
    """Retryable language-model backend failure (network, bad response)."""


class PreconditionError(RuntimeError):
    """A required artifact (hints, scoreboard, checkpoint) is missing or stale."""
