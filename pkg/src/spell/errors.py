"""Exception hierarchy for the spell engine.

Everything raised on purpose derives from SpellError so the CLI can map
failures to exit codes without enumerating modules.
"""

from __future__ import annotations


class SpellError(Exception):
    """Base class for all engine errors."""


class ConfigError(SpellError):
    """Bad, unknown, or missing configuration."""


class DomainError(SpellError, ValueError):
    """An argument is outside the function's documented domain."""


class ShapeError(SpellError, ValueError):
    """A sequence has the wrong length/shape for the operation."""


class DegenerateGroup(SpellError, ValueError):
    """A rollout group has zero reward variance and cannot be normalized."""


class EmptyDocument(SpellError, ValueError):
    """A document with empty text reached a stage that requires text."""


class EmptyContext(SpellError, ValueError):
    """A prompt render was asked for with no documents."""


class EmptyCluster(SpellError, ValueError):
    """Sampling was attempted from a cluster with no documents."""


class CorpusExhausted(SpellError):
    """No eligible cluster can produce further training instances."""


class IntegrityError(SpellError):
    """A persisted file failed its count/digest verification."""


class RestoreError(SpellError):
    """A checkpoint could not be restored.

    Carries human-readable diagnostics (version mismatch, corrupt JSON with
    byte offset, missing fields).
    """


class BackendError(SpellError):
    """A generation/embedding backend failed after any retries.

    kind is one of: "transport", "http_status", "exhausted_retries",
    "malformed_response".
    """

    def __init__(
        self,
        kind: str,
        message: str,
        *,
        status: int | None = None,
        retries: int = 0,
    ) -> None:
        super().__init__(message)
        self.kind = kind
        self.status = status
        self.retries = retries

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"BackendError(kind={self.kind!r}, status={self.status}, retries={self.retries}, msg={self.args[0]!r})"
