"""Backends: the HTTP client against a mock transport, and the scripted
simulation's determinism and role behaviours."""

import json
import math

import httpx
import numpy as np
import pytest

from spell.backends import (
    ApproxCharTokenizer,
    GenerationRequest,
    HttpBackend,
    SimAgentProfile,
    SimulatedBackend,
)
from spell.backends.base import (
    ROLE_JUDGE,
    ROLE_QUESTIONER,
    ROLE_RESPONDER,
    ROLE_VERIFIER,
    GenerationResult,
)
from spell.backends.simulated import CONTEXT_FREE_MARK, semantic_equal
from spell.errors import BackendError, DomainError, ShapeError
from spell.prompts import parse_question_output, parse_responder_answer, parse_verdict
from spell.rewards import cem_match
from spell.types import TASK_GENERAL_QA, QuestionSpec


def _request(n=1, prompt="hello", role=ROLE_RESPONDER, request_id="r1") -> GenerationRequest:
    return GenerationRequest(prompt=prompt, n=n, role_tag=role, request_id=request_id)


def _chat_body(texts, finish="stop"):
    return {
        "choices": [
            {"message": {"content": t}, "finish_reason": finish} for t in texts
        ],
        "usage": {"prompt_tokens": 7, "completion_tokens": 11},
    }


def _backend(handler, **kwargs) -> HttpBackend:
    kwargs.setdefault("backoff_s", 0.0)
    return HttpBackend(
        "http://test", "m", transport=httpx.MockTransport(handler), **kwargs
    )


# --- HTTP backend ---


def test_http_generate_happy_path():
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        return httpx.Response(200, json=_chat_body(["one", "two", "three"]))

    with _backend(handler) as backend:
        result = backend.generate(_request(n=3))
    assert result.completions == ["one", "two", "three"]
    assert result.usage == {"prompt_tokens": 7, "completion_tokens": 11}
    assert result.truncated == [False, False, False]
    assert result.latency_ms >= 0.0
    assert seen[0]["n"] == 3 and seen[0]["model"] == "m"
    assert seen[0]["messages"] == [{"role": "user", "content": "hello"}]


def test_http_retries_transient_failures_then_succeeds():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] <= 2:
            return httpx.Response(503)
        return httpx.Response(200, json=_chat_body(["ok"]))

    with _backend(handler, retries=3) as backend:
        result = backend.generate(_request())
    assert result.completions == ["ok"]
    assert calls["n"] == 3, "two retryable failures then success"


def test_http_retries_transport_errors():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] == 1:
            raise httpx.ConnectError("refused")
        return httpx.Response(200, json=_chat_body(["ok"]))

    with _backend(handler) as backend:
        assert backend.generate(_request()).completions == ["ok"]


def test_http_exhausted_retries():
    def handler(request):
        return httpx.Response(429)

    with _backend(handler, retries=2) as backend:
        with pytest.raises(BackendError) as excinfo:
            backend.generate(_request())
    assert excinfo.value.kind == "exhausted_retries"
    assert excinfo.value.retries == 2


def test_http_non_retryable_status_fails_fast():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        return httpx.Response(404, text="nope")

    with _backend(handler) as backend:
        with pytest.raises(BackendError) as excinfo:
            backend.generate(_request())
    assert excinfo.value.kind == "http_status"
    assert excinfo.value.status == 404
    assert calls["n"] == 1, "404 is not retried"


def test_http_batched_sampling_falls_back_to_singles():
    """A 400 on n>1 is retried as n single-completion requests, merged in order."""
    bodies = []

    def handler(request):
        payload = json.loads(request.content)
        bodies.append(payload)
        if payload["n"] > 1:
            return httpx.Response(400, text="n not supported")
        return httpx.Response(200, json=_chat_body([f"single-{len(bodies)}"]))

    with _backend(handler) as backend:
        result = backend.generate(_request(n=3))
    assert result.completions == ["single-2", "single-3", "single-4"]
    assert result.usage == {"prompt_tokens": 21, "completion_tokens": 33}, "usage sums"
    assert [b["n"] for b in bodies] == [3, 1, 1, 1]


def test_http_single_request_400_is_not_retried_as_fallback():
    def handler(request):
        return httpx.Response(400, text="bad request")

    with _backend(handler) as backend:
        with pytest.raises(BackendError) as excinfo:
            backend.generate(_request(n=1))
    assert excinfo.value.kind == "http_status"


@pytest.mark.parametrize(
    "body",
    [
        "not json",
        {"choices": "what"},
        {"choices": [{"message": {"content": "a"}}]},  # 1 choice for n=2
        {"choices": [{"message": {}}, {"message": {"content": "b"}}]},
        {"choices": [{"message": {"content": "a"}}, {"no_message": True}]},
    ],
)
def test_http_malformed_completion_responses(body):
    def handler(request):
        if isinstance(body, str):
            return httpx.Response(200, text=body)
        return httpx.Response(200, json=body)

    with _backend(handler) as backend:
        with pytest.raises(BackendError) as excinfo:
            backend.generate(_request(n=2))
    assert excinfo.value.kind == "malformed_response"


def test_http_truncation_flags():
    def handler(request):
        return httpx.Response(
            200,
            json={
                "choices": [
                    {"message": {"content": "full"}, "finish_reason": "stop"},
                    {"message": {"content": "cut"}, "finish_reason": "length"},
                ]
            },
        )

    with _backend(handler) as backend:
        result = backend.generate(_request(n=2))
    assert result.truncated == [False, True]


def test_http_embeddings_sorted_by_index():
    """Out-of-order embedding rows are reassembled by their index field."""

    def handler(request):
        payload = json.loads(request.content)
        assert payload["input"] == ["a", "b"]
        return httpx.Response(
            200,
            json={
                "data": [
                    {"index": 1, "embedding": [0.0, 1.0]},
                    {"index": 0, "embedding": [1.0, 0.0]},
                ]
            },
        )

    with _backend(handler) as backend:
        vectors = backend.embed(["a", "b"])
    assert vectors == [(1.0, 0.0), (0.0, 1.0)]
    assert backend.embed([]) == []


def test_http_embeddings_malformed():
    responses = iter(
        [
            {"data": [{"index": 0, "embedding": [1.0]}]},  # count mismatch for 2 inputs
            {"data": [{"index": 0, "embedding": [1.0]}, {"index": 1, "embedding": [1.0, 2.0]}]},
            {"data": [{"index": 0, "embedding": []}, {"index": 1, "embedding": [1.0]}]},
        ]
    )

    def handler(request):
        return httpx.Response(200, json=next(responses))

    with _backend(handler) as backend:
        for _ in range(3):
            with pytest.raises(BackendError) as excinfo:
                backend.embed(["a", "b"])
            assert excinfo.value.kind == "malformed_response"


# --- request/result contracts ---


def test_generation_request_validation():
    with pytest.raises(DomainError):
        _request(n=0)
    with pytest.raises(DomainError):
        GenerationRequest(prompt="", n=1, role_tag=ROLE_RESPONDER, request_id="x")
    with pytest.raises(DomainError):
        GenerationRequest(prompt="p", n=1, role_tag="narrator", request_id="x")
    with pytest.raises(DomainError):
        GenerationRequest(prompt="p", n=1, role_tag=ROLE_RESPONDER, request_id="")
    with pytest.raises(DomainError):
        _request(n=1).__class__(
            prompt="p", n=1, role_tag=ROLE_RESPONDER, request_id="x", top_p=0.0
        )


def test_generation_result_truncated_defaults():
    result = GenerationResult(completions=["a", "b"])
    assert result.truncated == [False, False]
    with pytest.raises(ShapeError):
        GenerationResult(completions=["a"], truncated=[False, False])


def test_approx_tokenizer_round_trip():
    tok = ApproxCharTokenizer()
    text = "abcdefghij"
    assert tok.decode(tok.encode(text)) == text
    assert tok.count(text) == math.ceil(len(text) / 4)
    assert tok.count("") == 0


# --- simulated backend ---


def test_sim_profile_validation():
    with pytest.raises(DomainError):
        SimAgentProfile(format_break_rate=1.5)
    with pytest.raises(DomainError):
        SimAgentProfile(verifier_accuracy=-0.1)
    with pytest.raises(DomainError):
        SimAgentProfile(embedding_dims=1)


def test_sim_generate_is_deterministic():
    profile = SimAgentProfile(seed=9)
    req = _request(n=4, prompt="Question: q? [answer-hint=key-ab12cd34]", request_id="det")
    first = SimulatedBackend(profile).generate(req)
    second = SimulatedBackend(profile).generate(req)
    assert first.completions == second.completions
    different_id = SimulatedBackend(profile).generate(
        GenerationRequest(prompt=req.prompt, n=4, role_tag=ROLE_RESPONDER, request_id="other")
    )
    assert different_id.completions != first.completions


def test_sim_questioner_emits_parseable_question():
    backend = SimulatedBackend(SimAgentProfile(seed=1))
    raw = backend.generate(_request(role=ROLE_QUESTIONER, prompt="propose a question")).completions[0]
    spec = parse_question_output(raw, TASK_GENERAL_QA)
    assert isinstance(spec, QuestionSpec)
    assert "[difficulty=" in spec.question and "[answer-hint=" in spec.question


def test_sim_questioner_format_break():
    backend = SimulatedBackend(SimAgentProfile(seed=1, format_break_rate=1.0))
    raw = backend.generate(_request(role=ROLE_QUESTIONER, prompt="propose")).completions[0]
    assert "{" not in raw, "a format break carries no JSON object"


def test_sim_questioner_difficulty_scales_with_exemplars():
    backend = SimulatedBackend(SimAgentProfile(seed=1))
    base_prompt = "propose a question"
    history_prompt = "### Example 1:\n...\n### Example 2:\n...\npropose a question"

    def difficulty(prompt):
        raw = backend.generate(
            _request(role=ROLE_QUESTIONER, prompt=prompt, request_id="d")
        ).completions[0]
        spec = parse_question_output(raw, TASK_GENERAL_QA)
        return float(spec.question.split("[difficulty=")[1].split("]")[0])

    assert difficulty(base_prompt) == pytest.approx(0.15)
    assert difficulty(history_prompt) == pytest.approx(0.15 + 2 * 0.12)


def test_sim_responder_without_documents_fails_grounded_questions():
    """The probe prompt (empty evidence block) only succeeds on context-free
    questions — this is what the grounding filter relies on."""
    backend = SimulatedBackend(SimAgentProfile(seed=3))
    grounded = "<text>\n\n\n\n</text>\n\nQuestion: q? [answer-hint=key-aa]\n"
    free = f"<text>\n\n\n\n</text>\n\nQuestion: q? [answer-hint=key-aa] {CONTEXT_FREE_MARK}\n"
    g_answer = parse_responder_answer(
        backend.generate(_request(prompt=grounded)).completions[0], TASK_GENERAL_QA
    )
    f_answer = parse_responder_answer(
        backend.generate(_request(prompt=free)).completions[0], TASK_GENERAL_QA
    )
    assert not cem_match(g_answer, "key-aa", TASK_GENERAL_QA)
    assert cem_match(f_answer, "key-aa", TASK_GENERAL_QA)


def test_sim_responder_skill_controls_accuracy():
    """With documents present, accuracy tracks clamp(skill + growth*step - d)."""

    def accuracy(profile, step, difficulty, n=200):
        backend = SimulatedBackend(profile)
        backend.set_step(step)
        prompt = (
            "<text>\n\nevidence\n\n</text>\n\n"
            f"Question: q? [difficulty={difficulty:.4f}] [answer-hint=key-bb]\n"
        )
        hits = 0
        for i in range(n):
            raw = backend.generate(_request(prompt=prompt, request_id=f"acc{i}")).completions[0]
            answer = parse_responder_answer(raw, TASK_GENERAL_QA)
            hits += cem_match(answer, "key-bb", TASK_GENERAL_QA)
        return hits / n

    easy = accuracy(SimAgentProfile(seed=4, responder_skill=0.9), step=0, difficulty=0.1)
    hard = accuracy(SimAgentProfile(seed=4, responder_skill=0.9), step=0, difficulty=0.85)
    assert easy > 0.7 and hard < 0.25, f"easy {easy}, hard {hard}"
    grown = accuracy(
        SimAgentProfile(seed=4, responder_skill=0.3, skill_growth_per_step=0.02),
        step=30,
        difficulty=0.1,
    )
    assert grown > 0.6, "skill growth with steps raises accuracy"


def test_sim_paraphrase_breaks_rule_but_not_semantics():
    backend = SimulatedBackend(SimAgentProfile(seed=5, responder_skill=0.98, paraphrase_rate=1.0))
    prompt = "<text>\n\nev\n\n</text>\n\nQuestion: q? [difficulty=0.0100] [answer-hint=key-ab12]\n"
    raws = backend.generate(_request(prompt=prompt, n=8, request_id="para")).completions
    answers = [parse_responder_answer(r, TASK_GENERAL_QA) for r in raws]
    paraphrased = [a for a in answers if a == "KEY AB12"]
    assert paraphrased, "paraphrase mode rewrites the hint"
    assert not cem_match("KEY AB12", "key-ab12", TASK_GENERAL_QA)
    assert semantic_equal("KEY AB12", "key-ab12")


def test_sim_verifier_reports_semantic_truth():
    backend = SimulatedBackend(SimAgentProfile(seed=6, verifier_accuracy=1.0))
    template = (
        "- Answer 1: {a}\n\n- Answer 2: {b}\n\n## Output Format\nDecision: [[YES]] or [[NO]]"
    )
    same = backend.generate(
        _request(role=ROLE_VERIFIER, prompt=template.format(a="42.0", b="42"))
    ).completions[0]
    diff = backend.generate(
        _request(role=ROLE_VERIFIER, prompt=template.format(a="41", b="42"))
    ).completions[0]
    assert parse_verdict(same) == 1
    assert parse_verdict(diff) == 0


def test_sim_verifier_accuracy_flips_verdicts():
    template = (
        "- Answer 1: 42\n\n- Answer 2: 42\n\n## Output Format\nDecision: [[YES]] or [[NO]]"
    )
    backend = SimulatedBackend(SimAgentProfile(seed=7, verifier_accuracy=0.0))
    raw = backend.generate(_request(role=ROLE_VERIFIER, prompt=template)).completions[0]
    assert parse_verdict(raw) == 0, "accuracy 0 always lies"


def test_sim_unparseable_verdicts():
    backend = SimulatedBackend(SimAgentProfile(seed=8, unparseable_verdict_rate=1.0))
    raw = backend.generate(
        _request(role=ROLE_VERIFIER, prompt="- Answer 1: a\n\n- Answer 2: b\n\n## Output Format")
    ).completions[0]
    assert parse_verdict(raw) is None


def test_sim_judge_role_parses_eval_prompt():
    backend = SimulatedBackend(SimAgentProfile(seed=9, verifier_accuracy=1.0))
    prompt = (
        "- Predicted Answer: Paris\n\n- Ground Truth Answer: paris\n\n"
        "## Output Format\nDecision: [[YES]] or [[NO]]"
    )
    raw = backend.generate(_request(role=ROLE_JUDGE, prompt=prompt)).completions[0]
    assert parse_verdict(raw) == 1


def test_sim_usage_accounting():
    backend = SimulatedBackend(SimAgentProfile(seed=10))
    result = backend.generate(_request(n=2, prompt="x" * 41))
    assert result.usage["prompt_tokens"] == math.ceil(41 / 4)
    assert result.usage["completion_tokens"] == sum(
        math.ceil(len(c) / 4) for c in result.completions
    )


def test_sim_embeddings_unit_norm_and_deterministic():
    backend = SimulatedBackend(SimAgentProfile(seed=11, embedding_dims=16))
    vectors = backend.embed(["alpha", "beta", "alpha"])
    assert len(vectors) == 3 and all(len(v) == 16 for v in vectors)
    assert vectors[0] == vectors[2], "same text embeds identically"
    assert vectors[0] != vectors[1]
    for vec in vectors:
        np.testing.assert_allclose(np.linalg.norm(vec), 1.0, rtol=1e-12)


def test_sim_set_step_validation():
    backend = SimulatedBackend()
    backend.set_step(3)
    assert backend.step == 3
    with pytest.raises(DomainError):
        backend.set_step(-1)


def test_semantic_equal_cases():
    assert semantic_equal("42.00", "42")
    assert semantic_equal("$1,000", "1000")
    assert not semantic_equal("1002", "1000")
    assert semantic_equal("1001", "1000"), "within 0.0015 relative tolerance"
    assert semantic_equal("Key AB-12", "key ab12")
    assert not semantic_equal("", "")
    assert not semantic_equal("key-a1", "key-b1"), "suffix digits do not trigger numeric mode"
