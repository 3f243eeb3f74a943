"""Curriculum state: per-cluster exemplar memory and context assembly.

Solved questions are retained per cluster (FIFO, bounded) and replayed as
exemplars so later proposals escalate past them. A proposal only enters
memory when its reward is strictly positive — i.e. the question was neither
unsolvable nor trivial for the current responder.
"""

from __future__ import annotations

import random
from typing import Sequence

from .backends.base import ROLE_RESPONDER, Backend, GenerationRequest
from .errors import DomainError, EmptyCluster
from .prompts import parse_responder_answer, render_responder_content
from .rewards import cem_match
from .types import DocumentCluster, HistoryEntry, QuestionSpec

DEFAULT_HISTORY_SIZE = 3


class HistoryMemory:
    """Bounded FIFO of solved (doc_ids, question, answer) exemplars."""

    def __init__(self, capacity: int = DEFAULT_HISTORY_SIZE) -> None:
        if capacity < 1:
            raise DomainError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: list[HistoryEntry] = []

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[HistoryEntry]:
        """Exemplars oldest first."""
        return list(self._entries)

    def exemplars(self) -> list[tuple[str, str]]:
        """(question, answer) pairs oldest first, for prompt rendering."""
        return [(e.question, e.answer) for e in self._entries]

    def _check(self) -> None:
        if len(self._entries) > self.capacity:  # invariant hook on every mutation
            raise AssertionError(
                f"history memory overflow: {len(self._entries)} > {self.capacity}"
            )

    def push_solvable(self, entry: HistoryEntry, question_reward: float) -> bool:
        """Retain entry iff the proposal reward is strictly positive.

        Evicts the oldest exemplar when at capacity. Returns True when the
        entry was stored.
        """
        if question_reward <= 0.0:
            return False
        self._entries.append(entry)
        if len(self._entries) > self.capacity:
            self._entries.pop(0)
        self._check()
        return True

    def to_json(self) -> list[dict]:
        return [e.to_json() for e in self._entries]

    @classmethod
    def from_json(cls, payload: list[dict], capacity: int = DEFAULT_HISTORY_SIZE) -> "HistoryMemory":
        memory = cls(capacity)
        for obj in payload:
            memory._entries.append(HistoryEntry.from_json(obj))
        memory._check()
        return memory


def sample_documents(cluster: DocumentCluster, m: int, rng: random.Random) -> list[str]:
    """Draw min(m, |cluster|) doc ids uniformly without replacement."""
    if len(cluster) == 0:
        raise EmptyCluster(f"cluster {cluster.cluster_id!r} has no documents")
    if m < 1:
        raise DomainError(f"m must be >= 1, got {m}")
    return rng.sample(list(cluster.doc_ids), min(m, len(cluster)))


def assemble_context(
    history: HistoryMemory, new_doc_ids: Sequence[str]
) -> tuple[list[str], list[tuple[str, str]]]:
    """Question context: history docs (oldest first) then the fresh subset.

    Doc ids are deduplicated keeping the first occurrence. Returns
    (doc_ids, exemplars).
    """
    ordered: list[str] = []
    seen: set[str] = set()
    for entry in history.entries():
        for doc_id in entry.doc_ids:
            if doc_id not in seen:
                seen.add(doc_id)
                ordered.append(doc_id)
    for doc_id in new_doc_ids:
        if doc_id not in seen:
            seen.add(doc_id)
            ordered.append(doc_id)
    return ordered, history.exemplars()


def grounding_filter(
    backend: Backend,
    question: QuestionSpec,
    *,
    request_id_base: str,
    attempts: int = 1,
    numeric_rel_tol: float = 0.0015,
    temperature: float = 0.7,
    top_p: float = 0.95,
    max_tokens: int = 4096,
) -> bool:
    """True iff the question needs the documents to answer.

    Probes the responder with an empty evidence block; if any probe answer
    already matches the reference, the question tests parametric knowledge
    rather than the documents and is rejected.
    """
    if attempts < 1:
        raise DomainError(f"attempts must be >= 1, got {attempts}")
    prompt = render_responder_content("", question)
    for attempt in range(attempts):
        result = backend.generate(
            GenerationRequest(
                prompt=prompt,
                n=1,
                role_tag=ROLE_RESPONDER,
                request_id=f"{request_id_base}:gnd{attempt}",
                temperature=temperature,
                top_p=top_p,
                max_tokens=max_tokens,
            )
        )
        answer = parse_responder_answer(result.completions[0], question.task)
        if cem_match(answer, question.answer, question.task, numeric_rel_tol=numeric_rel_tol):
            return False
    return True
