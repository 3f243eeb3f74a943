"""Generation backends: remote chat-completions service or a local simulation."""

from .base import (
    ApproxCharTokenizer,
    Backend,
    GenerationRequest,
    GenerationResult,
    Tokenizer,
    ROLE_JUDGE,
    ROLE_QUESTIONER,
    ROLE_RESPONDER,
    ROLE_VERIFIER,
)
from .http import HttpBackend
from .simulated import SimAgentProfile, SimulatedBackend, simulate_generate

__all__ = [
    "ApproxCharTokenizer",
    "Backend",
    "GenerationRequest",
    "GenerationResult",
    "HttpBackend",
    "ROLE_JUDGE",
    "ROLE_QUESTIONER",
    "ROLE_RESPONDER",
    "ROLE_VERIFIER",
    "SimAgentProfile",
    "SimulatedBackend",
    "Tokenizer",
    "simulate_generate",
]
