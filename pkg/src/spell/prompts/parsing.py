"""Parse raw model outputs into questions, answers, and verdicts.

All parsers strip closed <think>...</think> spans first so reasoning-model
outputs are judged by their visible text only.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from ..errors import DomainError
from ..types import MC_LETTERS, TASK_FINANCIAL_MATH, TASK_MULTIPLE_CHOICE, ALL_TASKS, QuestionSpec

# Reason codes for FormatError
REASON_NO_OBJECT = "no_object"
REASON_MISSING_KEY = "missing_key"
REASON_BAD_OPTIONS = "bad_options"
REASON_NON_NUMERIC_ANSWER = "non_numeric_answer"
REASON_EMPTY_FIELD = "empty_field"

_THINK_RE = re.compile(r"<think>.*?</think>", re.DOTALL)
_VERDICT_RE = re.compile(r"\[\[(YES|NO)\]\]")
_MC_LETTER_RE = re.compile(r"(?<![A-Za-z0-9])([A-D])(?![A-Za-z0-9])")

# Last number token in a string: optional sign, optional currency symbol,
# digits with optional comma grouping and decimal part, optional trailing %.
_NUMBER_RE = re.compile(r"[-+]?\s*[$€£¥]?\s*(?:\d[\d,]*(?:\.\d+)?|\.\d+)\s*%?")

_TRAILING_PUNCT = ".,;:!?"


@dataclass(frozen=True)
class FormatError:
    """A question proposal that failed structural validation.

    Returned (not raised) by parse_question_output; maps to the format
    penalty downstream.
    """

    reason: str
    detail: str = ""


def strip_think_spans(raw: str) -> str:
    """Remove closed <think>...</think> spans."""
    return _THINK_RE.sub("", raw)


def _balanced_objects(text: str) -> list[str]:
    """All balanced {...} spans, outermost only, left to right."""
    spans = []
    depth = 0
    start = -1
    in_string = False
    escape = False
    for i, ch in enumerate(text):
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"' and depth > 0:
            in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}":
            if depth > 0:
                depth -= 1
                if depth == 0:
                    spans.append(text[start : i + 1])
    return spans


def _last_json_object(text: str) -> dict | None:
    for span in reversed(_balanced_objects(text)):
        try:
            obj = json.loads(span)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def extract_last_number(text: str) -> tuple[float, bool] | None:
    """Extract the final number token from text.

    Returns (value, had_percent_sign) or None. Commas and leading currency
    symbols are permitted and stripped. The percent flag is surfaced so the
    caller can decide whether a rescale applies.
    """
    matches = _NUMBER_RE.findall(text)
    if not matches:
        return None
    token = matches[-1].strip()
    had_percent = token.endswith("%")
    cleaned = token.rstrip("%").strip()
    for sym in "$€£¥":
        cleaned = cleaned.replace(sym, "")
    cleaned = cleaned.replace(",", "").replace(" ", "")
    try:
        return float(cleaned), had_percent
    except ValueError:  # pragma: no cover - regex should prevent this
        return None


def last_number_token(text: str) -> str | None:
    """The final number token verbatim (for exact-decimal comparisons)."""
    matches = _NUMBER_RE.findall(text)
    if not matches:
        return None
    token = matches[-1].strip().rstrip("%").strip()
    for sym in "$€£¥":
        token = token.replace(sym, "")
    return token.replace(",", "").replace(" ", "")


def _coerce_text(value) -> str | None:
    """JSON field -> text, tolerating numeric answers; None when unusable."""
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return repr(value) if isinstance(value, float) else str(value)
    return None


def _normalize_mc_answer(value: str) -> str:
    letter = value.strip().strip("()[]").strip().upper()
    return letter


def parse_question_output(raw: str, task: str) -> QuestionSpec | FormatError:
    """Extract the last valid JSON object from a question proposal.

    Validates the object for the task and returns a QuestionSpec, or a
    FormatError whose reason is one of: no_object, missing_key, bad_options,
    non_numeric_answer, empty_field.
    """
    if task not in ALL_TASKS:
        raise DomainError(f"unknown task {task!r}")
    obj = _last_json_object(strip_think_spans(raw))
    if obj is None:
        return FormatError(REASON_NO_OBJECT, "no parseable JSON object found")

    if "question" not in obj or "answer" not in obj:
        missing = [k for k in ("question", "answer") if k not in obj]
        return FormatError(REASON_MISSING_KEY, f"missing keys: {', '.join(missing)}")

    question = _coerce_text(obj["question"])
    answer = _coerce_text(obj["answer"])
    if question is None or not question.strip():
        return FormatError(REASON_EMPTY_FIELD, "question is empty or not text")
    if answer is None or not answer.strip():
        return FormatError(REASON_EMPTY_FIELD, "answer is empty or not text")
    question = question.strip()
    answer = answer.strip()

    options: dict[str, str] | None = None
    if task == TASK_MULTIPLE_CHOICE:
        if "options" not in obj:
            return FormatError(REASON_MISSING_KEY, "missing keys: options")
        raw_options = obj["options"]
        if not isinstance(raw_options, dict) or tuple(sorted(raw_options)) != MC_LETTERS:
            return FormatError(REASON_BAD_OPTIONS, "options must be keyed exactly A-D")
        options = {}
        for letter in MC_LETTERS:
            text = _coerce_text(raw_options[letter])
            if text is None or not text.strip():
                return FormatError(REASON_BAD_OPTIONS, f"option {letter} is empty or not text")
            options[letter] = text.strip()
        answer = _normalize_mc_answer(answer)
        if answer not in MC_LETTERS:
            return FormatError(REASON_BAD_OPTIONS, "answer is not a letter A-D")
    elif task == TASK_FINANCIAL_MATH:
        parsed = extract_last_number(answer)
        if parsed is None or last_number_token(answer) is None:
            return FormatError(REASON_NON_NUMERIC_ANSWER, f"answer {answer!r} is not numeric")

    return QuestionSpec(task=task, question=question, answer=answer, options=options)


def _unwrap(value: str) -> str:
    """Trim trailing punctuation/whitespace and one layer of wrapping."""
    value = value.strip()
    value = value.rstrip(_TRAILING_PUNCT + " \t")
    value = value.strip()
    for open_ch, close_ch in (("(", ")"), ("[", "]"), ('"', '"'), ("'", "'"), ("*", "*")):
        if len(value) >= 2 and value.startswith(open_ch) and value.endswith(close_ch):
            inner = value[1:-1].strip()
            if inner:
                value = inner
    return value


def _answer_marker(task: str) -> str:
    return "Therefore, the answer is" if task == TASK_FINANCIAL_MATH else "The correct answer is"


def parse_responder_answer(raw: str, task: str) -> str:
    """Extract the final answer from a responder output.

    Takes the text after the last occurrence of the task's answer marker
    ("The correct answer is" / "Therefore, the answer is"), falling back to
    the last non-empty line when the marker is absent. Multiple-choice
    answers are reduced to a single letter A-D when one is unambiguously
    present.
    """
    if task not in ALL_TASKS:
        raise DomainError(f"unknown task {task!r}")
    text = strip_think_spans(raw)
    marker = _answer_marker(task)
    idx = text.lower().rfind(marker.lower())
    if idx >= 0:
        rest = text[idx + len(marker) :]
        # answer normally finishes the sentence on the same line
        first_line = rest.split("\n", 1)[0]
        candidate = first_line if first_line.strip() else rest
    else:
        lines = [line for line in text.splitlines() if line.strip()]
        candidate = lines[-1] if lines else ""
    candidate = _unwrap(candidate)
    if task == TASK_MULTIPLE_CHOICE:
        letters = set(_MC_LETTER_RE.findall(candidate))
        if len(letters) == 1:
            return letters.pop()
    return candidate


def parse_verdict(raw: str) -> int | None:
    """The last [[YES]]/[[NO]] as 1/0, or None when neither is present."""
    matches = _VERDICT_RE.findall(strip_think_spans(raw))
    if not matches:
        return None
    return 1 if matches[-1] == "YES" else 0
