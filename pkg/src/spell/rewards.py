"""Reward rules: answer checking, majority votes, and role rewards.

The three roles are scored from one rollout group: a question, G candidate
responses, and a G x G vote matrix (G verification verdicts per response).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation

from .errors import DomainError, ShapeError
from .prompts.parsing import _MC_LETTER_RE, last_number_token
from .types import TASK_FINANCIAL_MATH, TASK_GENERAL_QA, TASK_MULTIPLE_CHOICE, ALL_TASKS

_WS_RE = re.compile(r"\s+")
_EDGE_PUNCT = ".,;:!?\"'()[]{}*-"


@dataclass(frozen=True)
class RewardConfig:
    """Constants for the reward rules.

    sigma defaults to 0.5/3 so the proposal reward decays to ~0.011 as the
    mean response reward approaches 0 or 1.
    """

    mu: float = 0.5
    sigma: float = 0.5 / 3.0
    penalty_ungrounded: float = -0.5
    penalty_format: float = -1.0
    group_size: int = 8
    numeric_rel_tol: float = 0.0015

    def __post_init__(self) -> None:
        if not (0.0 < self.mu < 1.0):
            raise DomainError(f"mu must be in (0,1), got {self.mu}")
        if self.sigma <= 0.0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if self.group_size < 2:
            raise DomainError(f"group_size must be >= 2, got {self.group_size}")
        if self.numeric_rel_tol <= 0.0:
            raise DomainError(f"numeric_rel_tol must be positive, got {self.numeric_rel_tol}")
        if self.penalty_ungrounded > 0.0 or self.penalty_format > 0.0:
            raise DomainError("penalties must be non-positive")


def normalize_answer_text(text: str) -> str:
    """Lowercase, collapse whitespace, and strip surrounding punctuation."""
    out = _WS_RE.sub(" ", text.lower()).strip()
    return out.strip(_EDGE_PUNCT + " ")


def _reduce_to_letter(text: str) -> str | None:
    stripped = text.strip().strip("()[]").strip()
    if len(stripped) == 1 and stripped.upper() in "ABCD":
        return stripped.upper()
    letters = set(_MC_LETTER_RE.findall(text))
    if len(letters) == 1:
        return letters.pop()
    return None


def _numbers_match(extracted: str, reference: str, rel_tol: float) -> bool:
    """Exact-decimal relative comparison of the last number in each string.

    A trailing percent sign is stripped; no rescaling is applied unless both
    sides carry one (in which case dividing both by 100 cancels out), so
    mixed-unit pairs like "50%" vs "0.5" intentionally do not match.
    """
    ext_token = last_number_token(extracted)
    ref_token = last_number_token(reference)
    if ext_token is None or ref_token is None:
        return False
    try:
        x = Decimal(ext_token)
        ref = Decimal(ref_token)
    except InvalidOperation:
        return False
    if ref == 0:
        return x == 0
    return abs(x - ref) <= Decimal(str(rel_tol)) * abs(ref)


def cem_match(extracted: str, reference: str, task: str, numeric_rel_tol: float = 0.0015) -> bool:
    """Rule-based answer check (cover-exact-match family).

    general_qa: the normalized reference must appear as a substring of the
    normalized extracted answer. multiple_choice: letter equality.
    financial_math: |x - ref| <= tol * |ref| on the last number token of each
    side (ref == 0 demands x == 0).
    """
    if task not in ALL_TASKS:
        raise DomainError(f"unknown task {task!r}")
    if task == TASK_MULTIPLE_CHOICE:
        ext_letter = _reduce_to_letter(extracted)
        ref_letter = _reduce_to_letter(reference)
        return ext_letter is not None and ext_letter == ref_letter
    if task == TASK_FINANCIAL_MATH:
        return _numbers_match(extracted, reference, numeric_rel_tol)
    norm_ext = normalize_answer_text(extracted)
    norm_ref = normalize_answer_text(reference)
    if not norm_ref or not norm_ext:
        return False
    return norm_ref in norm_ext


def _check_votes(votes: list[int], expected_size: int | None) -> None:
    if expected_size is not None and len(votes) != expected_size:
        raise ShapeError(f"expected {expected_size} votes, got {len(votes)}")
    if not votes:
        raise ShapeError("votes must be non-empty")
    if any(v not in (0, 1) for v in votes):
        raise DomainError(f"votes must be 0/1, got {votes}")


def majority_vote(votes: list[int], expected_size: int | None = None) -> int:
    """Strict majority of binary votes; ties resolve to 0."""
    _check_votes(votes, expected_size)
    return 1 if 2 * sum(votes) > len(votes) else 0


def verifier_rewards(votes: list[int], expected_size: int | None = None) -> tuple[int, list[int]]:
    """(majority, per-vote rewards): a vote is rewarded iff it matches the majority."""
    majority = majority_vote(votes, expected_size)
    return majority, [1 if v == majority else 0 for v in votes]


def responder_reward(rule_pass: bool, majority: int) -> int:
    """A response scores if either the rule check or the vote majority accepts it."""
    if majority not in (0, 1):
        raise DomainError(f"majority must be 0/1, got {majority}")
    return max(int(rule_pass), majority)


def questioner_reward(
    mean_responder_reward: float,
    grounded: bool,
    format_ok: bool,
    config: RewardConfig,
) -> float:
    """Difficulty-shaped proposal reward.

    Precedence: format failure, then grounding failure, then the Gaussian
    shape over the mean response reward — maximal at mu, exactly 0 at the
    endpoints 0 and 1 (unsolvable / trivial).
    """
    if not format_ok:
        return config.penalty_format
    if not grounded:
        return config.penalty_ungrounded
    r = mean_responder_reward
    if not (0.0 <= r <= 1.0):
        raise DomainError(f"mean responder reward must be in [0,1], got {r}")
    if r == 0.0 or r == 1.0:
        return 0.0
    return math.exp(-((r - config.mu) ** 2) / (2.0 * config.sigma**2))


@dataclass
class RolloutGroup:
    """One fully scored instance: question, G responses, G x G votes."""

    question: str
    reference: str
    task: str
    responses: list[str]
    extracted: list[str]
    rule_pass: list[bool]
    votes: list[list[int]]
    vote_parsed: list[list[bool]]
    majorities: list[int] = field(default_factory=list)
    responder_rewards: list[int] = field(default_factory=list)
    verifier_reward_matrix: list[list[int]] = field(default_factory=list)
    mean_responder_reward: float = 0.0

    def __post_init__(self) -> None:
        g = len(self.responses)
        if g < 2:
            raise ShapeError(f"a rollout group needs >= 2 responses, got {g}")
        for name, seq in (
            ("extracted", self.extracted),
            ("rule_pass", self.rule_pass),
            ("votes", self.votes),
            ("vote_parsed", self.vote_parsed),
        ):
            if len(seq) != g:
                raise ShapeError(f"{name} must have {g} entries, got {len(seq)}")
        for row, flags in zip(self.votes, self.vote_parsed):
            if len(row) != g or len(flags) != g:
                raise ShapeError(f"vote matrix must be {g}x{g}")


def score_rollout_group(group: RolloutGroup) -> RolloutGroup:
    """Fill in majorities, per-role rewards, and the group mean (in place)."""
    g = len(group.responses)
    group.majorities = []
    group.verifier_reward_matrix = []
    group.responder_rewards = []
    for i in range(g):
        majority, ver_rewards = verifier_rewards(group.votes[i], expected_size=g)
        group.majorities.append(majority)
        group.verifier_reward_matrix.append(ver_rewards)
        group.responder_rewards.append(responder_reward(group.rule_pass[i], majority))
    group.mean_responder_reward = sum(group.responder_rewards) / g
    return group
