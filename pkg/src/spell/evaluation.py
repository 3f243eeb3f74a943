"""Benchmark harness: pass@k scoring with rule + judge equivalence checks.

Items are scored by drawing n completions, extracting answers, and taking
max(rule check, judge verdict) per completion (multiple-choice uses the rule
check alone). Contexts above the token budget are middle-truncated: keep the
head and tail, drop the middle, never touch the question or instructions.
"""

from __future__ import annotations

import json
import logging
import math
from typing import Sequence

from .backends.base import (
    ROLE_JUDGE,
    ROLE_RESPONDER,
    ApproxCharTokenizer,
    Backend,
    GenerationRequest,
    Tokenizer,
)
from .errors import BackendError, DomainError, IntegrityError
from .prompts import (
    parse_responder_answer,
    parse_verdict,
    render_judge,
    render_responder_content,
)
from .rewards import cem_match
from .types import TASK_MULTIPLE_CHOICE, EvalItem, QuestionSpec

logger = logging.getLogger(__name__)

REPORT_VERSION = 1


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimator 1 - C(n-c, k)/C(n, k) in stable product form."""
    if not 0 <= c <= n:
        raise DomainError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    miss = 1.0
    for i in range(k):
        miss *= (n - c - i) / (n - i)
    return 1.0 - miss


def middle_truncate(tokens: Sequence, limit: int) -> list:
    """Keep the first ceil(limit/2) and last floor(limit/2) tokens."""
    if limit < 2:
        raise DomainError(f"limit must be >= 2, got {limit}")
    items = list(tokens)
    if len(items) <= limit:
        return items
    head = math.ceil(limit / 2)
    tail = limit - head
    return items[:head] + items[len(items) - tail :]


def truncate_text(text: str, limit: int, tokenizer: Tokenizer) -> str:
    """Middle-truncate text measured in tokenizer units."""
    return tokenizer.decode(middle_truncate(tokenizer.encode(text), limit))


def load_eval_dataset(path: str) -> list[EvalItem]:
    """Read a JSONL dataset of items; validation errors name the line."""
    items: list[EvalItem] = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IntegrityError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            try:
                options = obj.get("options")
                items.append(
                    EvalItem(
                        item_id=str(obj["item_id"]),
                        context=str(obj["context"]),
                        question=str(obj["question"]),
                        reference=str(obj["reference"]),
                        task=str(obj["task"]),
                        options=dict(options) if options is not None else None,
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise IntegrityError(f"{path}:{lineno}: bad item: {exc}") from exc
    if not items:
        raise IntegrityError(f"{path}: dataset is empty")
    return items


def _question_spec(item: EvalItem) -> QuestionSpec:
    return QuestionSpec(
        task=item.task,
        question=item.question,
        answer=item.reference,
        options=item.options,
    )


def render_eval_prompt(
    item: EvalItem, max_input_tokens: int, tokenizer: Tokenizer
) -> str:
    """Responder prompt whose document block fits the token budget.

    The budget charged to the context is max_input_tokens minus the cost of
    the prompt scaffolding (instructions, question, options); only the
    context is ever truncated.
    """
    spec = _question_spec(item)
    overhead = tokenizer.count(render_responder_content("", spec))
    budget = max(2, max_input_tokens - overhead)
    return render_responder_content(truncate_text(item.context, budget, tokenizer), spec)


def score_item(
    item: EvalItem,
    completions: Sequence[str],
    judge_backend: Backend | None,
    *,
    numeric_rel_tol: float = 0.0015,
    judge_max_tokens: int = 1024,
) -> tuple[int, int]:
    """Count correct completions; returns (c, judge_fallbacks).

    Per completion the score is max(rule check, judge verdict) except for
    multiple choice, which is accuracy only. The judge runs at temperature 0
    with one sample; a backend failure or an unparseable verdict falls back
    to the rule score for that completion and is counted as a fallback.
    """
    correct = 0
    fallbacks = 0
    for index, completion in enumerate(completions):
        extracted = parse_responder_answer(completion, item.task)
        rule = cem_match(extracted, item.reference, item.task, numeric_rel_tol=numeric_rel_tol)
        if rule or item.task == TASK_MULTIPLE_CHOICE or judge_backend is None:
            correct += int(rule)
            continue
        prompt = render_judge(item.question, extracted, item.reference)
        try:
            result = judge_backend.generate(
                GenerationRequest(
                    prompt=prompt,
                    n=1,
                    role_tag=ROLE_JUDGE,
                    request_id=f"eval:{item.item_id}:judge{index:02d}",
                    temperature=0.0,
                    max_tokens=judge_max_tokens,
                )
            )
        except BackendError as exc:
            logger.warning("judge failed for %s[%d]: %s", item.item_id, index, exc)
            fallbacks += 1
            continue
        verdict = parse_verdict(result.completions[0])
        if verdict is None:
            fallbacks += 1
        elif verdict == 1:
            correct += 1
    return correct, fallbacks


def run_eval(
    dataset: Sequence[EvalItem],
    backend: Backend,
    judge_backend: Backend | None,
    *,
    n: int = 8,
    k_values: Sequence[int] = (1,),
    max_input_tokens: int = 16384,
    temperature: float = 0.7,
    top_p: float = 0.95,
    max_tokens: int = 4096,
    numeric_rel_tol: float = 0.0015,
    tokenizer: Tokenizer | None = None,
) -> dict:
    """Evaluate every item and aggregate pass@k over the scored ones.

    An item whose generation fails is marked skipped and excluded from the
    aggregates but counted in the report.
    """
    if not dataset:
        raise DomainError("dataset is empty")
    for k in k_values:
        if not 1 <= k <= n:
            raise DomainError(f"each k must be in [1, n={n}], got {k}")
    tokenizer = tokenizer or ApproxCharTokenizer()

    item_rows: list[dict] = []
    scored: list[tuple[int, int]] = []
    skipped = 0
    total_fallbacks = 0
    for item in dataset:
        prompt = render_eval_prompt(item, max_input_tokens, tokenizer)
        try:
            result = backend.generate(
                GenerationRequest(
                    prompt=prompt,
                    n=n,
                    role_tag=ROLE_RESPONDER,
                    request_id=f"eval:{item.item_id}:res",
                    temperature=temperature,
                    top_p=top_p,
                    max_tokens=max_tokens,
                )
            )
        except BackendError as exc:
            logger.warning("skipping %s: %s", item.item_id, exc)
            skipped += 1
            item_rows.append({"item_id": item.item_id, "skipped": True, "error": str(exc)})
            continue
        c, fallbacks = score_item(
            item, result.completions, judge_backend, numeric_rel_tol=numeric_rel_tol
        )
        total_fallbacks += fallbacks
        scored.append((n, c))
        item_rows.append(
            {
                "item_id": item.item_id,
                "skipped": False,
                "n": n,
                "c": c,
                "pass@1": pass_at_k(n, c, 1),
                "judge_fallbacks": fallbacks,
            }
        )

    aggregates: dict[str, float] = {}
    if scored:
        for k in k_values:
            aggregates[f"pass@{k}"] = sum(pass_at_k(ni, ci, k) for ni, ci in scored) / len(scored)
    return {
        "v": REPORT_VERSION,
        "config": {
            "n": n,
            "k": list(k_values),
            "max_input_tokens": max_input_tokens,
            "temperature": temperature,
            "top_p": top_p,
            "max_tokens": max_tokens,
            "tokenizer": tokenizer.name,
        },
        "items": item_rows,
        "aggregates": aggregates,
        "scored_items": len(scored),
        "skipped_items": skipped,
        "judge_fallbacks": total_fallbacks,
    }
