"""Chat-completions HTTP backend with bounded concurrency and retries."""

from __future__ import annotations

import logging
import threading
import time
from typing import Sequence

import httpx

from ..errors import BackendError
from .base import Backend, GenerationRequest, GenerationResult

logger = logging.getLogger(__name__)

_RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class HttpBackend:
    """Talks to an OpenAI-compatible service.

    - POST {base_url}/v1/chat/completions with a single user message.
    - POST {base_url}/v1/embeddings for embedding vectors.
    Transport errors and retryable statuses back off exponentially; servers
    that reject batched sampling (HTTP 400 with n > 1) are retried as n
    single-completion requests.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        embed_model: str | None = None,
        timeout_s: float = 60.0,
        retries: int = 3,
        backoff_s: float = 0.25,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.embed_model = embed_model or model
        self.retries = retries
        self.backoff_s = backoff_s
        self._permits = threading.Semaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout_s, transport=transport)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "HttpBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _post(self, path: str, payload: dict) -> httpx.Response:
        """One POST with retries on transport errors and retryable statuses."""
        attempts = self.retries + 1
        last_error: str = ""
        for attempt in range(attempts):
            if attempt:
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))
            try:
                with self._permits:
                    response = self._client.post(self.base_url + path, json=payload)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                logger.warning("%s %s (attempt %d/%d)", path, last_error, attempt + 1, attempts)
                continue
            if response.status_code in _RETRYABLE_STATUS:
                last_error = f"HTTP {response.status_code}"
                logger.warning("%s %s (attempt %d/%d)", path, last_error, attempt + 1, attempts)
                continue
            if response.status_code != 200:
                raise BackendError(
                    "http_status",
                    f"{path} returned HTTP {response.status_code}: {response.text[:200]}",
                    status=response.status_code,
                    retries=attempt,
                )
            return response
        raise BackendError(
            "exhausted_retries",
            f"{path} failed after {attempts} attempts ({last_error})",
            retries=self.retries,
        )

    def generate(self, request: GenerationRequest) -> GenerationResult:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "n": request.n,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        started = time.monotonic()
        try:
            response = self._post("/v1/chat/completions", payload)
        except BackendError as exc:
            if exc.kind == "http_status" and exc.status == 400 and request.n > 1:
                logger.info(
                    "server rejected n=%d for %s; falling back to single-completion requests",
                    request.n,
                    request.request_id,
                )
                return self._generate_singly(request, started)
            raise
        result = self._parse_completions(response, request.n)
        result.latency_ms = (time.monotonic() - started) * 1000.0
        return result

    def _generate_singly(self, request: GenerationRequest, started: float) -> GenerationResult:
        completions: list[str] = []
        truncated: list[bool] = []
        usage = {"prompt_tokens": 0, "completion_tokens": 0}
        for i in range(request.n):
            payload = {
                "model": self.model,
                "messages": [{"role": "user", "content": request.prompt}],
                "n": 1,
                "temperature": request.temperature,
                "top_p": request.top_p,
                "max_tokens": request.max_tokens,
            }
            response = self._post("/v1/chat/completions", payload)
            single = self._parse_completions(response, 1)
            completions.extend(single.completions)
            truncated.extend(single.truncated)
            usage["prompt_tokens"] += single.usage.get("prompt_tokens", 0)
            usage["completion_tokens"] += single.usage.get("completion_tokens", 0)
        return GenerationResult(
            completions=completions,
            usage=usage,
            latency_ms=(time.monotonic() - started) * 1000.0,
            truncated=truncated,
        )

    @staticmethod
    def _parse_completions(response: httpx.Response, n: int) -> GenerationResult:
        try:
            body = response.json()
        except ValueError as exc:
            raise BackendError("malformed_response", f"response is not JSON: {exc}") from exc
        choices = body.get("choices")
        if not isinstance(choices, list) or len(choices) != n:
            got = len(choices) if isinstance(choices, list) else type(choices).__name__
            raise BackendError("malformed_response", f"expected {n} choices, got {got}")
        completions: list[str] = []
        truncated: list[bool] = []
        for choice in choices:
            message = choice.get("message") if isinstance(choice, dict) else None
            content = message.get("content") if isinstance(message, dict) else None
            if not isinstance(content, str):
                raise BackendError("malformed_response", "choice missing message.content")
            completions.append(content)
            truncated.append(choice.get("finish_reason") == "length")
        usage_body = body.get("usage") or {}
        usage = {
            "prompt_tokens": int(usage_body.get("prompt_tokens", 0)),
            "completion_tokens": int(usage_body.get("completion_tokens", 0)),
        }
        return GenerationResult(completions=completions, usage=usage, truncated=truncated)

    def embed(self, texts: Sequence[str]) -> list[tuple[float, ...]]:
        if not texts:
            return []
        response = self._post("/v1/embeddings", {"model": self.embed_model, "input": list(texts)})
        try:
            body = response.json()
        except ValueError as exc:
            raise BackendError("malformed_response", f"response is not JSON: {exc}") from exc
        data = body.get("data")
        if not isinstance(data, list) or len(data) != len(texts):
            got = len(data) if isinstance(data, list) else type(data).__name__
            raise BackendError("malformed_response", f"expected {len(texts)} embeddings, got {got}")
        rows: list[tuple[int, tuple[float, ...]]] = []
        for i, entry in enumerate(data):
            vector = entry.get("embedding") if isinstance(entry, dict) else None
            if not isinstance(vector, list) or not vector:
                raise BackendError("malformed_response", "entry missing embedding values")
            rows.append((int(entry.get("index", i)), tuple(float(v) for v in vector)))
        rows.sort(key=lambda pair: pair[0])
        widths = {len(vec) for _, vec in rows}
        if len(widths) != 1:
            raise BackendError("malformed_response", f"embedding widths differ: {sorted(widths)}")
        return [vec for _, vec in rows]
