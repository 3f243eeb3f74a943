"""Backend contracts: requests, results, and token counting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

from ..errors import DomainError, ShapeError

ROLE_QUESTIONER = "questioner"
ROLE_RESPONDER = "responder"
ROLE_VERIFIER = "verifier"
ROLE_JUDGE = "judge"
_ROLES = (ROLE_QUESTIONER, ROLE_RESPONDER, ROLE_VERIFIER, ROLE_JUDGE)

DEFAULT_TEMPERATURE = 0.7
DEFAULT_TOP_P = 0.95
DEFAULT_MAX_TOKENS = 4096


@dataclass(frozen=True)
class GenerationRequest:
    """One sampling request for n completions of a single prompt."""

    prompt: str
    n: int
    role_tag: str
    request_id: str
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self) -> None:
        if not self.prompt:
            raise DomainError("prompt must be non-empty")
        if self.n < 1:
            raise DomainError(f"n must be >= 1, got {self.n}")
        if self.role_tag not in _ROLES:
            raise DomainError(f"role_tag must be one of {_ROLES}, got {self.role_tag!r}")
        if not self.request_id:
            raise DomainError("request_id must be non-empty")
        if not (0.0 <= self.temperature <= 2.0):
            raise DomainError(f"temperature must be in [0,2], got {self.temperature}")
        if not (0.0 < self.top_p <= 1.0):
            raise DomainError(f"top_p must be in (0,1], got {self.top_p}")
        if self.max_tokens < 1:
            raise DomainError(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass
class GenerationResult:
    """Exactly n completions plus usage accounting."""

    completions: list[str]
    usage: dict[str, int] = field(default_factory=dict)
    latency_ms: float = 0.0
    truncated: list[bool] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.truncated:
            self.truncated = [False] * len(self.completions)
        if len(self.truncated) != len(self.completions):
            raise ShapeError(
                f"truncated flags ({len(self.truncated)}) must match completions "
                f"({len(self.completions)})"
            )


@runtime_checkable
class Backend(Protocol):
    """Anything that can sample completions and embed texts."""

    def generate(self, request: GenerationRequest) -> GenerationResult: ...

    def embed(self, texts: Sequence[str]) -> list[tuple[float, ...]]: ...


class Tokenizer(Protocol):
    """Reversible tokenization used for budgets and truncation."""

    name: str

    def encode(self, text: str) -> list[str]: ...

    def decode(self, tokens: Sequence[str]) -> str: ...

    def count(self, text: str) -> int: ...


class ApproxCharTokenizer:
    """Default tokenizer: 4-character chunks, so count(text) = ceil(len/4).

    Crude but deterministic, and encode/decode round-trips exactly, which is
    all budget math and middle truncation need.
    """

    name = "chars/4"
    _CHUNK = 4

    def encode(self, text: str) -> list[str]:
        return [text[i : i + self._CHUNK] for i in range(0, len(text), self._CHUNK)]

    def decode(self, tokens: Sequence[str]) -> str:
        return "".join(tokens)

    def count(self, text: str) -> int:
        return math.ceil(len(text) / self._CHUNK)
