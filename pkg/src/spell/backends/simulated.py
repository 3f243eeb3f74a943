"""Deterministic scripted backend for closed-loop runs without a model server.

The simulation plays all four roles by introspecting the rendered prompt:

- The questioner invents a question whose text carries bracketed markers —
  ``[difficulty=...]``, ``[answer-hint=...]`` and optionally
  ``[context-free]`` — that downstream simulated roles (and tests) read back.
  Production code never parses these markers; they are the simulation's only
  knowledge channel.
- The responder answers correctly with probability
  ``clamp(skill + growth * step - difficulty, 0.02, 0.98)`` when documents
  are present. With an empty document block (the grounding probe) it answers
  correctly iff the question is marked context-free.
- The verifier and judge compare the two quoted answers for semantic
  equality (numeric tolerance or alphanumeric-canonical match) and report
  the truth with probability ``verifier_accuracy``.

Every completion is a pure function of (profile.seed, request_id, step,
completion index), so reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import Sequence

import numpy as np

from ..errors import DomainError
from .base import (
    ROLE_JUDGE,
    ROLE_QUESTIONER,
    ROLE_RESPONDER,
    ROLE_VERIFIER,
    GenerationRequest,
    GenerationResult,
)

logger = logging.getLogger(__name__)

# Stable phrases from the role templates, used to recover task and inputs
# from a rendered prompt.
_ANCHOR_FINANCIAL_QUESTIONER = "multi-step mathematical reasoning"
_ANCHOR_MC_QUESTIONER = "multiple choice question"
_ANCHOR_FINANCIAL_RESPONDER = "Therefore, the answer is"
_ANCHOR_MC_RESPONDER = "What is the correct answer to this question:"

_TEXT_BLOCK_RE = re.compile(r"<text>\n(.*?)\n</text>", re.DOTALL)
_QUESTION_LINE_RE = re.compile(r"^Question: (.*)$", re.MULTILINE)
_MC_QUESTION_RE = re.compile(
    r"What is the correct answer to this question: (.*)$", re.MULTILINE
)
_DIFFICULTY_RE = re.compile(r"\[difficulty=([0-9.]+)\]")
_HINT_RE = re.compile(r"\[answer-hint=([^\]]*)\]")
CONTEXT_FREE_MARK = "[context-free]"
_ANSWER_1_RE = re.compile(r"- Answer 1: (.*?)\n\n- Answer 2: ", re.DOTALL)
_ANSWER_2_RE = re.compile(r"- Answer 2: (.*?)\n\n## Output Format", re.DOTALL)
_PREDICTED_RE = re.compile(
    r"- Predicted Answer: (.*?)\n\n- Ground Truth Answer: ", re.DOTALL
)
_GROUND_TRUTH_RE = re.compile(r"- Ground Truth Answer: (.*?)\n\n## Output Format", re.DOTALL)

_EXEMPLAR_MARK = "### Example"
_MC_LETTERS = "ABCD"


@dataclass(frozen=True)
class SimAgentProfile:
    """Behavioural knobs for the scripted agents.

    Rates are probabilities in [0, 1]:
    - format_break_rate: questioner emits prose without a JSON object.
    - parametric_rate: questioner emits a context-free question (answerable
      without documents, so the grounding probe succeeds).
    - paraphrase_rate: a correct general-QA responder rephrases the answer so
      the rule check misses but a semantic comparison still passes.
    - unparseable_verdict_rate: verifier/judge output carries no decision.
    """

    seed: int = 0
    responder_skill: float = 0.55
    skill_growth_per_step: float = 0.01
    verifier_accuracy: float = 0.95
    questioner_difficulty_base: float = 0.15
    difficulty_per_exemplar: float = 0.12
    format_break_rate: float = 0.0
    parametric_rate: float = 0.0
    paraphrase_rate: float = 0.0
    unparseable_verdict_rate: float = 0.0
    embedding_dims: int = 32

    def __post_init__(self) -> None:
        for name in (
            "verifier_accuracy",
            "format_break_rate",
            "parametric_rate",
            "paraphrase_rate",
            "unparseable_verdict_rate",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"{name} must be in [0, 1], got {value}")
        if self.embedding_dims < 2:
            raise DomainError(f"embedding_dims must be >= 2, got {self.embedding_dims}")


def _rng_for(profile: SimAgentProfile, request_id: str, step: int, index: int) -> random.Random:
    key = f"{profile.seed}|{request_id}|{step}|{index}".encode("utf-8")
    seed = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")
    return random.Random(seed)


def _clamp(value: float, low: float, high: float) -> float:
    return min(high, max(low, value))


def _as_decimal(text: str) -> Decimal | None:
    """Parse text that is wholly a number (allowing $ , %), else None."""
    cleaned = text.strip().strip("\"'")
    if cleaned.endswith("%"):
        cleaned = cleaned[:-1].strip()
    while cleaned and cleaned[0] in "$€£¥":
        cleaned = cleaned[1:].strip()
    cleaned = cleaned.replace(",", "")
    if not cleaned:
        return None
    try:
        return Decimal(cleaned)
    except InvalidOperation:
        return None


def _canonical(text: str) -> str:
    return "".join(ch for ch in text.lower() if ch.isalnum())


def semantic_equal(first: str, second: str, rel_tol: float = 0.0015) -> bool:
    """Ground truth the scripted verifier reports (modulo its accuracy).

    Wholly numeric pairs compare under a relative tolerance; anything else
    compares by lowercase alphanumeric canonicalisation.
    """
    a, b = _as_decimal(first), _as_decimal(second)
    if a is not None and b is not None:
        if b == 0:
            return a == 0
        return abs(a - b) <= Decimal(str(rel_tol)) * abs(b)
    canon_first = _canonical(first)
    return canon_first == _canonical(second) and canon_first != ""


def _question_difficulty(profile: SimAgentProfile, exemplar_count: int) -> float:
    raw = profile.questioner_difficulty_base + profile.difficulty_per_exemplar * exemplar_count
    return _clamp(raw, 0.0, 1.0)


def _questioner_completion(profile: SimAgentProfile, prompt: str, rng: random.Random) -> str:
    if _ANCHOR_FINANCIAL_QUESTIONER in prompt:
        task = "financial_math"
    elif _ANCHOR_MC_QUESTIONER in prompt:
        task = "multiple_choice"
    else:
        task = "general_qa"
    difficulty = _question_difficulty(profile, prompt.count(_EXEMPLAR_MARK))

    if rng.random() < profile.format_break_rate:
        return (
            "I weighed several candidate questions against the passages but "
            "none of them satisfied every design principle, so I am unable to "
            "settle on a final one."
        )

    context_free = rng.random() < profile.parametric_rate
    token = f"{rng.getrandbits(32):08x}"
    payload: dict[str, object]
    if task == "financial_math":
        answer = f"{rng.uniform(10.0, 9000.0):.2f}"
        stem = f"What adjusted total is recorded for ledger entry {token}?"
    elif task == "multiple_choice":
        answer = rng.choice(_MC_LETTERS)
        stem = f"Which option matches the record for entry {token}?"
    else:
        answer = f"key-{token}"
        stem = f"Which identifier is associated with record {token} across the passages?"
    markers = f"[difficulty={difficulty:.4f}] [answer-hint={answer}]"
    if context_free:
        markers += f" {CONTEXT_FREE_MARK}"
    question = f"{stem} {markers}"

    payload = {"question": question, "answer": answer}
    if task == "multiple_choice":
        payload["options"] = {
            letter: f"entry value {rng.getrandbits(16):04x}" for letter in _MC_LETTERS
        }
    return (
        "The passages describe related records, so a linking question is "
        "appropriate.\n\n" + json.dumps(payload)
    )


def _wrong_answer(task: str, hint: str, rng: random.Random) -> str:
    if task == "financial_math":
        value = _as_decimal(hint)
        if value is None:
            return "0"
        return str(value * Decimal("1.5") + Decimal("1"))
    if task == "multiple_choice":
        letters = [letter for letter in _MC_LETTERS if letter != hint]
        return rng.choice(letters)
    token = f"{rng.getrandbits(32):08x}"
    wrong = f"key-{token}"
    if wrong == hint:
        wrong += "0"
    return wrong


def _responder_completion(
    profile: SimAgentProfile, prompt: str, rng: random.Random, step: int
) -> str:
    if _ANCHOR_FINANCIAL_RESPONDER in prompt:
        task = "financial_math"
        marker = "Therefore, the answer is"
    elif _ANCHOR_MC_RESPONDER in prompt:
        task = "multiple_choice"
        marker = "The correct answer is"
    else:
        task = "general_qa"
        marker = "The correct answer is"

    if task == "multiple_choice":
        question_matches = _MC_QUESTION_RE.findall(prompt)
    else:
        question_matches = _QUESTION_LINE_RE.findall(prompt)
    question = question_matches[-1] if question_matches else ""

    block = _TEXT_BLOCK_RE.search(prompt)
    has_documents = bool(block and block.group(1).strip())

    hint_match = _HINT_RE.search(question)
    hint = hint_match.group(1) if hint_match else ""
    difficulty_match = _DIFFICULTY_RE.search(question)
    difficulty = float(difficulty_match.group(1)) if difficulty_match else 0.5
    context_free = CONTEXT_FREE_MARK in question

    if not has_documents:
        correct = context_free and bool(hint)
    else:
        success = _clamp(
            profile.responder_skill + profile.skill_growth_per_step * step - difficulty,
            0.02,
            0.98,
        )
        correct = bool(hint) and rng.random() < success

    if correct:
        value = hint
        if task == "general_qa" and rng.random() < profile.paraphrase_rate:
            value = hint.upper().replace("-", " ")
    else:
        value = _wrong_answer(task, hint, rng)

    if task == "multiple_choice":
        conclusion = f"{marker} ({value})."
    else:
        conclusion = f"{marker} {value}."
    if task == "financial_math":
        body = (
            "Step 1: locate the base amount in the tables. "
            "Step 2: apply the stated adjustment."
        )
    else:
        body = "The passages state the requested record directly."
    return f"{body}\n\n{conclusion}"


def _decision_completion(
    profile: SimAgentProfile,
    rng: random.Random,
    first: str | None,
    second: str | None,
) -> str:
    if rng.random() < profile.unparseable_verdict_rate or first is None or second is None:
        return (
            "Explanation: the relationship between the two answers is unclear "
            "from the material provided.\n\nDecision: inconclusive"
        )
    truth = semantic_equal(first, second)
    verdict = truth if rng.random() < profile.verifier_accuracy else not truth
    word = "[[YES]]" if verdict else "[[NO]]"
    return (
        "Explanation: compared the two values for equivalent meaning and "
        f"magnitude.\n\nDecision: {word}"
    )


def _extract(pattern: re.Pattern[str], prompt: str) -> str | None:
    match = pattern.search(prompt)
    return match.group(1) if match else None


def simulate_generate(
    profile: SimAgentProfile, request: GenerationRequest, step: int
) -> GenerationResult:
    """Produce request.n scripted completions for the request's role."""
    completions: list[str] = []
    for index in range(request.n):
        rng = _rng_for(profile, request.request_id, step, index)
        if request.role_tag == ROLE_QUESTIONER:
            text = _questioner_completion(profile, request.prompt, rng)
        elif request.role_tag == ROLE_RESPONDER:
            text = _responder_completion(profile, request.prompt, rng, step)
        elif request.role_tag == ROLE_VERIFIER:
            text = _decision_completion(
                profile,
                rng,
                _extract(_ANSWER_1_RE, request.prompt),
                _extract(_ANSWER_2_RE, request.prompt),
            )
        elif request.role_tag == ROLE_JUDGE:
            text = _decision_completion(
                profile,
                rng,
                _extract(_PREDICTED_RE, request.prompt),
                _extract(_GROUND_TRUTH_RE, request.prompt),
            )
        else:  # pragma: no cover - GenerationRequest validates role_tag
            raise DomainError(f"unknown role {request.role_tag!r}")
        completions.append(text)
    usage = {
        "prompt_tokens": math.ceil(len(request.prompt) / 4),
        "completion_tokens": sum(math.ceil(len(text) / 4) for text in completions),
    }
    return GenerationResult(completions=completions, usage=usage, latency_ms=0.0)


def _embedding(profile: SimAgentProfile, text: str) -> tuple[float, ...]:
    key = f"{profile.seed}|embed|{text}".encode("utf-8")
    seed = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")
    rng = np.random.default_rng(seed)
    vector = rng.standard_normal(profile.embedding_dims)
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:  # pragma: no cover - standard normal draw of all zeros
        vector[0] = 1.0
        norm = 1.0
    return tuple(float(v) for v in vector / norm)


class SimulatedBackend:
    """Backend-protocol adapter around the scripted agents.

    The orchestrator advances the simulated clock with set_step; embeddings
    are seeded unit vectors derived from the text.
    """

    def __init__(self, profile: SimAgentProfile | None = None) -> None:
        self.profile = profile or SimAgentProfile()
        self._step = 0

    def set_step(self, step: int) -> None:
        if step < 0:
            raise DomainError(f"step must be >= 0, got {step}")
        self._step = step

    @property
    def step(self) -> int:
        return self._step

    def generate(self, request: GenerationRequest) -> GenerationResult:
        return simulate_generate(self.profile, request, self._step)

    def embed(self, texts: Sequence[str]) -> list[tuple[float, ...]]:
        return [_embedding(self.profile, text) for text in texts]
