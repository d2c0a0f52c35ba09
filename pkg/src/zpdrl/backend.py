"""Generation backends shared by curation and evaluation.

``ToyPolicyBackend`` samples from an in-repo policy snapshot.
``ChatCompletionBackend`` talks to any server exposing the usual
chat-completion JSON shape (see ``docs/protocol.md``).
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .policy import PolicyParams, sample_batch

logger = logging.getLogger(__name__)

FINISH_REASONS = ("stop", "length")


class BackendUnavailable(RuntimeError):
    """The backend kept failing after the configured number of attempts."""


@dataclass(frozen=True)
class GenRequest:
    system_prompt: str
    user_prompt: str
    n: int = 1
    max_tokens: int = 64
    temperature: float = 1.0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class GenResponse:
    texts: tuple[str, ...]
    finish_reasons: tuple[str, ...]

    def __post_init__(self):
        if len(self.texts) != len(self.finish_reasons):
            raise ValueError("texts and finish_reasons must align")
        bad = set(self.finish_reasons) - set(FINISH_REASONS)
        if bad:
            raise ValueError(f"unknown finish reasons {bad}")


class Backend(Protocol):
    name: str

    def generate(self, request: GenRequest) -> GenResponse: ...


class ToyPolicyBackend:
    """Samples from a frozen :class:`PolicyParams` snapshot.

    The toy policy sees the prompt only through its hashed key, so the
    system prompt is accepted and ignored. Output is a pure function of
    (snapshot, user prompt, n, max_tokens, temperature, seed).
    """

    def __init__(self, params: PolicyParams, name: str = "toy-policy"):
        self.params = params.with_weights(params.weights)
        self.name = name

    def generate(self, request: GenRequest) -> GenResponse:
        rng = np.random.default_rng(request.seed)
        key = self.params.key_for(request.user_prompt)
        samples = sample_batch(self.params, [key] * request.n, request.max_tokens, request.temperature, rng)
        return GenResponse(
            tuple(self.params.vocab.decode(s.tokens) for s in samples),
            tuple("length" if s.truncated else "stop" for s in samples),
        )


def _map_finish_reason(reason) -> str:
    return "length" if reason in ("length", "max_tokens", "max_output_tokens") else "stop"


@dataclass
class ChatCompletionBackend:
    """HTTP client for chat-completion servers, with retries and a concurrency cap.

    ``generate`` is safe to call from many threads; at most ``max_in_flight``
    requests are outstanding at once. Transport errors, non-2xx statuses and
    malformed payloads are retried with exponential backoff; after
    ``max_retries`` failed attempts :class:`BackendUnavailable` is raised.
    """

    base_url: str
    model: str
    path: str = "/v1/chat/completions"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_secs: float = 60.0
    max_retries: int = 5
    max_in_flight: int = 8
    backoff_base: float = 0.5
    backoff_max: float = 30.0
    client: object = None
    sleep: Callable[[float], None] = time.sleep
    _slots: threading.BoundedSemaphore = field(init=False, repr=False)

    def __post_init__(self):
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self._slots = threading.BoundedSemaphore(self.max_in_flight)
        if self.client is None:
            import httpx

            self.client = httpx.Client(timeout=self.timeout_secs)

    @classmethod
    def from_config(cls, config: dict, **overrides) -> "ChatCompletionBackend":
        keys = {"base_url", "model", "path", "api_key_env", "timeout_secs", "max_retries", "max_in_flight"}
        unknown = set(config) - keys
        if unknown:
            raise ValueError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**{**config, **overrides})

    @property
    def name(self) -> str:
        return self.model

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/" + self.path.lstrip("/")

    def request_body(self, request: GenRequest) -> dict:
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "n": request.n,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        return body

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    @staticmethod
    def parse_payload(payload: dict, n: int) -> GenResponse:
        choices = payload["choices"]
        if not isinstance(choices, list) or len(choices) != n:
            raise ValueError(f"expected {n} choices, got {len(choices) if isinstance(choices, list) else choices!r}")
        choices = sorted(choices, key=lambda c: c.get("index", 0))
        texts = []
        for c in choices:
            content = c["message"]["content"]
            if not isinstance(content, str):
                raise ValueError("choice content is not a string")
            texts.append(content)
        return GenResponse(tuple(texts), tuple(_map_finish_reason(c.get("finish_reason")) for c in choices))

    def generate(self, request: GenRequest) -> GenResponse:
        data = json.dumps(self.request_body(request), ensure_ascii=False).encode("utf-8")
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            if attempt:
                self.sleep(min(self.backoff_max, self.backoff_base * 2 ** (attempt - 1)))
            try:
                with self._slots:
                    resp = self.client.post(self.url, content=data, headers=self._headers())
                if not 200 <= resp.status_code < 300:
                    raise RuntimeError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                return self.parse_payload(resp.json(), request.n)
            except Exception as exc:  # transport, status, or payload problem
                last_error = exc
                logger.warning("attempt %d/%d against %s failed: %s", attempt + 1, self.max_retries, self.url, exc)
        raise BackendUnavailable(f"{self.url} failed {self.max_retries} times: {last_error}") from last_error


def generate_many(backend: Backend, requests: Sequence[GenRequest], max_workers: int = 8) -> list[GenResponse]:
    """Run requests on a bounded thread pool; results keep request order."""
    if max_workers <= 1 or len(requests) <= 1:
        return [backend.generate(r) for r in requests]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(backend.generate, requests))
