"""Render role prompts from text template assets.

Templates are plain-text assets keyed by (role, task, history-presence).
Rendering uses literal token replacement, never str.format, because the
templates themselves contain JSON braces.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources

from ..errors import DomainError, EmptyContext, EmptyDocument
from ..types import MC_LETTERS, TASK_MULTIPLE_CHOICE, ALL_TASKS, QuestionSpec

_TEMPLATE_NAMES = (
    "questioner_general_qa",
    "questioner_general_qa_history",
    "questioner_financial_math",
    "questioner_financial_math_history",
    "questioner_multiple_choice",
    "questioner_multiple_choice_history",
    "responder_general_qa",
    "responder_financial_math",
    "responder_multiple_choice",
    "verifier",
    "judge",
)


@lru_cache(maxsize=None)
def template_text(name: str) -> str:
    """Return the raw text of a named template asset."""
    if name not in _TEMPLATE_NAMES:
        raise DomainError(f"unknown template {name!r}")
    ref = resources.files(__package__).joinpath("templates").joinpath(f"{name}.txt")
    return ref.read_text(encoding="utf-8")


def template_digests() -> dict[str, str]:
    """sha256 of every template asset, for run manifests."""
    return {
        name: hashlib.sha256(template_text(name).encode("utf-8")).hexdigest()
        for name in _TEMPLATE_NAMES
    }


def join_documents(docs: list[tuple[str, str]]) -> str:
    """Concatenate (doc_id, text) pairs into one numbered passage block.

    Each passage is prefixed "Passage {i}:" (1-based); passages are separated
    by a blank line.
    """
    parts = []
    for i, (doc_id, text) in enumerate(docs, start=1):
        if not text.strip():
            raise EmptyDocument(f"document {doc_id!r} has empty text")
        parts.append(f"Passage {i}:\n{text}")
    return "\n\n".join(parts)


def _fill(template: str, mapping: dict[str, str]) -> str:
    out = template
    for key, value in mapping.items():
        out = out.replace("{" + key + "}", value)
    return out


def _render_examples(history: list[tuple[str, str]]) -> str:
    blocks = []
    for i, (question, answer) in enumerate(history, start=1):
        blocks.append(f"### Example {i}:\n\nQuestion: {question}\n\nAnswer: {answer}")
    return "\n\n".join(blocks)


def render_questioner(
    docs: list[tuple[str, str]],
    task: str,
    history: list[tuple[str, str]] | None = None,
) -> str:
    """Render the question-proposal prompt for a task.

    docs are (doc_id, text) pairs forming the context block. history is a
    list of (question, answer) exemplars, oldest first; when non-empty the
    escalation variant of the template is used and one example block is
    rendered per exemplar.
    """
    if task not in ALL_TASKS:
        raise DomainError(f"unknown task {task!r}")
    if not docs:
        raise EmptyContext("questioner prompt needs at least one document")
    context = join_documents(docs)
    if history:
        template = template_text(f"questioner_{task}_history")
        return _fill(template, {"context": context, "examples": _render_examples(history)})
    template = template_text(f"questioner_{task}")
    return _fill(template, {"context": context})


def render_responder_content(content: str, question: QuestionSpec) -> str:
    """Render a responder prompt from a pre-joined (possibly truncated or
    empty) document block. The empty-block form is what the grounding probe
    uses: question only, no evidence."""
    template = template_text(f"responder_{question.task}")
    mapping = {"content": content, "question": question.question}
    if question.task == TASK_MULTIPLE_CHOICE:
        assert question.options is not None
        for letter in MC_LETTERS:
            mapping[f"choice_{letter}"] = question.options[letter]
    return _fill(template, mapping)


def render_responder(docs: list[tuple[str, str]], question: QuestionSpec) -> str:
    """Render the answering prompt over a document set."""
    if not docs:
        raise EmptyContext("responder prompt needs at least one document")
    return render_responder_content(join_documents(docs), question)


def render_verifier(question: str, candidate: str, reference: str) -> str:
    """Render the answer-equivalence prompt (candidate vs reference)."""
    return _fill(
        template_text("verifier"),
        {"problem": question, "answer_1": candidate, "answer_2": reference},
    )


def render_judge(question: str, predicted: str, reference: str) -> str:
    """Render the evaluation judge prompt (prediction vs ground truth)."""
    return _fill(
        template_text("judge"),
        {"question": question, "predicted answer": predicted, "ground truth": reference},
    )
