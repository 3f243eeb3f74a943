"""Prompt templates, rendering, and model-output parsing for the three roles."""

from .parsing import (
    FormatError,
    extract_last_number,
    last_number_token,
    parse_question_output,
    parse_responder_answer,
    parse_verdict,
    strip_think_spans,
)
from .rendering import (
    join_documents,
    render_judge,
    render_questioner,
    render_responder,
    render_responder_content,
    render_verifier,
    template_digests,
    template_text,
)

__all__ = [
    "FormatError",
    "extract_last_number",
    "join_documents",
    "last_number_token",
    "parse_question_output",
    "parse_responder_answer",
    "parse_verdict",
    "render_judge",
    "render_questioner",
    "render_responder",
    "render_responder_content",
    "render_verifier",
    "strip_think_spans",
    "template_digests",
    "template_text",
]
