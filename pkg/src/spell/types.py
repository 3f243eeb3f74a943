"""Shared domain types: documents, clusters, tasks, questions, embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DomainError, ShapeError

# Task families the engine knows how to ask, answer, and check.
TASK_GENERAL_QA = "general_qa"
TASK_FINANCIAL_MATH = "financial_math"
TASK_MULTIPLE_CHOICE = "multiple_choice"
ALL_TASKS = (TASK_GENERAL_QA, TASK_FINANCIAL_MATH, TASK_MULTIPLE_CHOICE)

MC_LETTERS = ("A", "B", "C", "D")


@dataclass(frozen=True)
class RawDocument:
    """One corpus document as ingested (pre-filter)."""

    doc_id: str
    text: str
    quality: float = 1.0

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise DomainError("doc_id must be non-empty")
        if not (0.0 <= self.quality <= 1.0):
            raise DomainError(f"quality must be in [0,1], got {self.quality}")

    @property
    def char_len(self) -> int:
        return len(self.text)


@dataclass(frozen=True)
class DocumentCluster:
    """A group of topically related documents the loop samples from."""

    cluster_id: str
    doc_ids: tuple[str, ...]
    domain_label: str | None = None

    def __post_init__(self) -> None:
        if not self.cluster_id:
            raise DomainError("cluster_id must be non-empty")

    def __len__(self) -> int:
        return len(self.doc_ids)


@dataclass(frozen=True)
class QuestionSpec:
    """A parsed question/answer proposal.

    options is present iff task == multiple_choice, in which case it maps
    exactly the letters A-D to option texts and answer is one of those letters.
    """

    task: str
    question: str
    answer: str
    options: dict[str, str] | None = None

    def __post_init__(self) -> None:
        if self.task not in ALL_TASKS:
            raise DomainError(f"unknown task {self.task!r}")
        if not self.question.strip() or not self.answer.strip():
            raise DomainError("question and answer must be non-empty")
        if self.task == TASK_MULTIPLE_CHOICE:
            if self.options is None or tuple(sorted(self.options)) != MC_LETTERS:
                raise DomainError("multiple_choice requires options keyed exactly A-D")
            if self.answer not in MC_LETTERS:
                raise DomainError("multiple_choice answer must be a letter A-D")
        elif self.options is not None:
            raise DomainError(f"options are only valid for multiple_choice, not {self.task}")


@dataclass(frozen=True)
class EmbeddingVector:
    """A fixed-width embedding; values must be finite."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise ShapeError("embedding must have at least one dimension")
        if not all(math.isfinite(v) for v in self.values):
            raise DomainError("embedding contains non-finite values")

    @property
    def dims(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class EvalItem:
    """One evaluation example: a context, a question, and a reference answer."""

    item_id: str
    context: str
    question: str
    reference: str
    task: str
    options: dict[str, str] | None = None

    def __post_init__(self) -> None:
        if self.task not in ALL_TASKS:
            raise DomainError(f"unknown task {self.task!r}")
        if self.task == TASK_MULTIPLE_CHOICE and (
            self.options is None or tuple(sorted(self.options)) != MC_LETTERS
        ):
            raise DomainError("multiple_choice eval items need options keyed A-D")


@dataclass
class HistoryEntry:
    """One solved exemplar retained by the curriculum memory."""

    doc_ids: tuple[str, ...]
    question: str
    answer: str

    def to_json(self) -> dict:
        return {"doc_ids": list(self.doc_ids), "question": self.question, "answer": self.answer}

    @classmethod
    def from_json(cls, obj: dict) -> "HistoryEntry":
        return cls(
            doc_ids=tuple(obj["doc_ids"]),
            question=obj["question"],
            answer=obj["answer"],
        )
