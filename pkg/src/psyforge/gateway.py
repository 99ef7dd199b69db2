"""Chat-completion access with retries, rate limiting, caching and a scripted mock.

Everything that talks to a model goes through :class:`Gateway`. A gateway
pairs an :class:`LLMProviderHandle` (static configuration) with a backend
that knows one provider's wire format. Backends raise
:class:`TransientProviderError` for failures worth retrying and
:class:`ProviderError` for everything else.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from collections import defaultdict
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Protocol, Union

import httpx

logger = logging.getLogger(__name__)

JUDGE_TEMPERATURE = 0.0
SYNTHESIS_TEMPERATURE = 0.7

BACKOFF_BASE_S = 1.0
BACKOFF_FACTOR = 2.0
BACKOFF_JITTER = 0.2


class GatewayError(Exception):
    """Base class for provider-side failures surfaced to callers."""


class ProviderError(GatewayError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class TransientProviderError(ProviderError):
    """A failure that may succeed on retry (timeouts, 5xx, 429)."""


class ProviderTimeout(TransientProviderError):
    pass


class RateLimitExhausted(GatewayError):
    pass


class RetriesExhausted(ProviderError):
    def __init__(self, message: str, attempts: int, last_error: Exception | None):
        super().__init__(message, getattr(last_error, "status", None))
        self.attempts = attempts
        self.last_error = last_error


@dataclass(frozen=True)
class LLMProviderHandle:
    """Static description of one provider/model endpoint.

    ``auth_env`` names the environment variable holding the API key; the key
    itself is read only at request time and is never stored on the handle.
    """

    provider_name: str
    model_name: str
    endpoint: str = ""
    auth_env: str | None = None
    rate_limit: float = 60.0
    max_retries: int = 3
    timeout: float = 120.0

    def __post_init__(self) -> None:
        if self.rate_limit <= 0:
            raise ValueError(f"rate_limit must be > 0, got {self.rate_limit}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.timeout <= 0:
            raise ValueError(f"timeout must be > 0, got {self.timeout}")

    @property
    def default_auth_env(self) -> str:
        return self.auth_env or f"FORGE_{self.provider_name.upper()}_KEY"

    def api_key(self) -> str | None:
        return os.environ.get(self.default_auth_env)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ChatRequest:
    system: str
    user: str
    temperature: float = SYNTHESIS_TEMPERATURE
    seed: int | None = None
    tag: str = ""


@dataclass
class ChatResponse:
    text: str
    token_usage: dict[str, int] = field(default_factory=dict)
    latency_ms: float = 0.0
    attempt_count: int = 1
    cached: bool = False


class Backend(Protocol):
    def send(self, handle: LLMProviderHandle, request: ChatRequest) -> tuple[str, dict[str, int]]:
        ...


# --------------------------------------------------------------------- rate limit


class TokenBucket:
    """Thread-safe token bucket refilled at ``rate_per_minute``.

    ``acquire`` blocks until a token is available. If the wait would exceed
    ``max_wait`` seconds it raises :class:`RateLimitExhausted` instead.
    """

    def __init__(
        self,
        rate_per_minute: float,
        capacity: float | None = None,
        max_wait: float | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate_per_minute <= 0:
            raise ValueError("rate_per_minute must be > 0")
        self.rate = rate_per_minute / 60.0
        self.capacity = capacity if capacity is not None else max(1.0, min(rate_per_minute / 60.0, 10.0))
        self.max_wait = max_wait
        self._clock = clock
        self._sleep = sleep
        self._tokens = self.capacity
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Take one token; returns the seconds spent waiting.

        The token is reserved up front (the balance may go negative) and the
        caller sleeps off the deficit once, so later callers queue behind it.
        """
        with self._lock:
            now = self._clock()
            self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
            self._last = now
            need = (1.0 - self._tokens) / self.rate
            if need > 0 and self.max_wait is not None and need > self.max_wait:
                raise RateLimitExhausted(f"rate limit wait {need:.2f}s exceeds max_wait {self.max_wait:.2f}s")
            self._tokens -= 1.0
        if need <= 0:
            return 0.0
        self._sleep(need)
        return need


# --------------------------------------------------------------------- cache


def cache_key(model: str, request: ChatRequest) -> str:
    """SHA-256 over (model, system, user, temperature, seed); any prompt edit changes the key."""
    payload = json.dumps(
        [model, request.system, request.user, request.temperature, request.seed],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ResponseCache:
    """Content-addressed response cache, on disk when ``directory`` is given."""

    def __init__(self, directory: str | Path | None = None, enabled: bool = True):
        self.enabled = enabled
        self.directory = Path(directory) if directory is not None else None
        self._memory: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        assert self.directory is not None
        return self.directory / key[:2] / f"{key}.json"

    def lookup(self, key: str) -> str | None:
        if not self.enabled:
            return None
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        if self.directory is None:
            return None
        path = self._path(key)
        if not path.exists():
            return None
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
            text = record["text"]
            if hashlib.sha256(text.encode("utf-8")).hexdigest() != record["sha256"]:
                raise ValueError("checksum mismatch")
        except (ValueError, KeyError, TypeError) as exc:
            logger.warning("corrupt cache entry %s treated as miss: %s", path, exc)
            return None
        with self._lock:
            self._memory[key] = text
        return text

    def store(self, key: str, text: str) -> None:
        if not self.enabled:
            return
        with self._lock:
            self._memory[key] = text
        if self.directory is None:
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {"text": text, "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest()}
        tmp = path.with_suffix(f".tmp{threading.get_ident()}")
        tmp.write_text(json.dumps(record, ensure_ascii=False), encoding="utf-8")
        os.replace(tmp, path)


# --------------------------------------------------------------------- gateway


BatchResult = Union[ChatResponse, GatewayError]


class Gateway:
    """Retrying, rate-limited, cached front door to a single backend."""

    def __init__(
        self,
        handle: LLMProviderHandle,
        backend: Backend,
        cache: ResponseCache | None = None,
        limiter: TokenBucket | None = None,
        sleep: Callable[[float], None] = time.sleep,
        jitter_seed: int = 0,
    ):
        self.handle = handle
        self.backend = backend
        self.cache = cache
        self.limiter = limiter or TokenBucket(handle.rate_limit, sleep=sleep)
        self._sleep = sleep
        self._rng = random.Random(jitter_seed)
        self._rng_lock = threading.Lock()

    def backoff_delay(self, retry_index: int) -> float:
        base = BACKOFF_BASE_S * BACKOFF_FACTOR**retry_index
        with self._rng_lock:
            jitter = self._rng.uniform(-BACKOFF_JITTER, BACKOFF_JITTER)
        return base * (1.0 + jitter)

    def cache_lookup(self, request: ChatRequest) -> ChatResponse | None:
        if self.cache is None:
            return None
        text = self.cache.lookup(cache_key(self.handle.model_name, request))
        if text is None:
            return None
        return ChatResponse(text=text, attempt_count=0, cached=True)

    def cache_store(self, request: ChatRequest, response: ChatResponse) -> None:
        if self.cache is not None:
            self.cache.store(cache_key(self.handle.model_name, request), response.text)

    def complete(self, request: ChatRequest) -> ChatResponse:
        hit = self.cache_lookup(request)
        if hit is not None:
            logger.debug("cache hit tag=%s", request.tag)
            return hit

        attempts = 1 + self.handle.max_retries
        last_error: Exception | None = None
        for attempt in range(1, attempts + 1):
            self.limiter.acquire()
            started = time.perf_counter()
            try:
                text, usage = self.backend.send(self.handle, request)
            except TransientProviderError as exc:
                last_error = exc
                logger.info(
                    "attempt %d/%d failed tag=%s provider=%s: %s",
                    attempt, attempts, request.tag, self.handle.provider_name, exc,
                )
                if attempt < attempts:
                    self._sleep(self.backoff_delay(attempt - 1))
                continue
            except ProviderError as exc:
                logger.info("attempt %d/%d fatal tag=%s: %s", attempt, attempts, request.tag, exc)
                raise
            if not text or not text.strip():
                last_error = TransientProviderError("empty response text")
                logger.info("attempt %d/%d empty response tag=%s", attempt, attempts, request.tag)
                if attempt < attempts:
                    self._sleep(self.backoff_delay(attempt - 1))
                continue
            latency = (time.perf_counter() - started) * 1000.0
            logger.debug("attempt %d/%d ok tag=%s", attempt, attempts, request.tag)
            response = ChatResponse(text=text, token_usage=dict(usage), latency_ms=latency, attempt_count=attempt)
            self.cache_store(request, response)
            return response

        if isinstance(last_error, ProviderError) and last_error.status == 429:
            raise RateLimitExhausted(
                f"provider kept rate limiting after {attempts} attempts (tag={request.tag})"
            )
        raise RetriesExhausted(
            f"{self.handle.provider_name} failed after {attempts} attempts (tag={request.tag}): {last_error}",
            attempts,
            last_error,
        )

    def complete_batch(self, requests: Sequence[ChatRequest], parallelism: int = 4) -> list[BatchResult]:
        """Run requests concurrently; results are returned in request order.

        Per-item failures are returned in place of the response rather than raised.
        """
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if not requests:
            return []

        def run(req: ChatRequest) -> BatchResult:
            try:
                return self.complete(req)
            except GatewayError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(run, requests))


# --------------------------------------------------------------------- mock


MockReply = Union[str, Exception]


class MockProvider:
    """Deterministic scripted backend.

    Lookup order for each call: ``(tag, ordinal)`` script, exact user-prompt
    match, then ``fallback`` (a string or a callable taking the request).
    The ordinal counts calls per tag, retries included. Scripted exceptions
    are raised instead of returned.
    """

    def __init__(
        self,
        by_tag: Mapping[tuple[str, int], MockReply] | None = None,
        by_prompt: Mapping[str, MockReply] | None = None,
        fallback: MockReply | Callable[[ChatRequest], MockReply] | None = None,
    ):
        self.by_tag = dict(by_tag or {})
        self.by_prompt = dict(by_prompt or {})
        self.fallback = fallback
        self.calls: list[ChatRequest] = []
        self._ordinals: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def calls_for(self, tag: str) -> list[ChatRequest]:
        return [c for c in self.calls if c.tag == tag]

    def send(self, handle: LLMProviderHandle, request: ChatRequest) -> tuple[str, dict[str, int]]:
        with self._lock:
            ordinal = self._ordinals[request.tag]
            self._ordinals[request.tag] += 1
            self.calls.append(request)
        if (request.tag, ordinal) in self.by_tag:
            reply = self.by_tag[(request.tag, ordinal)]
        elif request.user in self.by_prompt:
            reply = self.by_prompt[request.user]
        elif self.fallback is not None:
            reply = self.fallback(request) if callable(self.fallback) else self.fallback
        else:
            raise ProviderError(f"mock has no script for tag={request.tag!r} ordinal={ordinal}")
        if isinstance(reply, Exception):
            raise reply
        usage = {"prompt_tokens": len(request.user.split()), "completion_tokens": len(reply.split())}
        return reply, usage


def mock_handle(model_name: str = "mock-model", max_retries: int = 3) -> LLMProviderHandle:
    return LLMProviderHandle(provider_name="mock", model_name=model_name, rate_limit=6e6, max_retries=max_retries)


def mock_gateway(provider: MockProvider, max_retries: int = 3, cache: ResponseCache | None = None) -> Gateway:
    """Gateway over a mock with no real sleeping."""
    return Gateway(mock_handle(max_retries=max_retries), provider, cache=cache, sleep=lambda s: None)


# --------------------------------------------------------------------- HTTP


class HttpBackend:
    """Provider adapters speaking each vendor's chat-completion JSON."""

    def __init__(self, client: httpx.Client | None = None):
        self.client = client or httpx.Client()

    def send(self, handle: LLMProviderHandle, request: ChatRequest) -> tuple[str, dict[str, int]]:
        builder = _ADAPTERS.get(handle.provider_name)
        if builder is None:
            raise ProviderError(f"no HTTP adapter for provider {handle.provider_name!r}")
        url, headers, body, parse = builder(handle, request)
        try:
            resp = self.client.post(url, headers=headers, json=body, timeout=handle.timeout)
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(f"timeout after {handle.timeout}s: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientProviderError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500 or resp.status_code == 408:
            raise TransientProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
        if resp.status_code >= 400:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
        try:
            return parse(resp.json())
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransientProviderError(f"unexpected response shape: {exc}") from exc


def _auth(handle: LLMProviderHandle) -> str:
    key = handle.api_key()
    if not key:
        raise ProviderError(f"missing API key in ${handle.default_auth_env}")
    return key


def _openai(handle: LLMProviderHandle, request: ChatRequest):
    url = handle.endpoint or "https://api.openai.com/v1/chat/completions"
    headers = {"Authorization": f"Bearer {_auth(handle)}"}
    body: dict[str, Any] = {
        "model": handle.model_name,
        "messages": [
            {"role": "system", "content": request.system},
            {"role": "user", "content": request.user},
        ],
        "temperature": request.temperature,
    }
    if request.seed is not None:
        body["seed"] = request.seed

    def parse(data: dict) -> tuple[str, dict[str, int]]:
        usage = data.get("usage") or {}
        return data["choices"][0]["message"]["content"], {
            "prompt_tokens": int(usage.get("prompt_tokens", 0)),
            "completion_tokens": int(usage.get("completion_tokens", 0)),
        }

    return url, headers, body, parse


def _anthropic(handle: LLMProviderHandle, request: ChatRequest):
    url = handle.endpoint or "https://api.anthropic.com/v1/messages"
    headers = {"x-api-key": _auth(handle), "anthropic-version": "2023-06-01"}
    body = {
        "model": handle.model_name,
        "system": request.system,
        "messages": [{"role": "user", "content": request.user}],
        "temperature": request.temperature,
        "max_tokens": 8192,
    }

    def parse(data: dict) -> tuple[str, dict[str, int]]:
        text = "".join(block["text"] for block in data["content"] if block.get("type") == "text")
        usage = data.get("usage") or {}
        return text, {
            "prompt_tokens": int(usage.get("input_tokens", 0)),
            "completion_tokens": int(usage.get("output_tokens", 0)),
        }

    return url, headers, body, parse


def _gemini(handle: LLMProviderHandle, request: ChatRequest):
    base = handle.endpoint or "https://generativelanguage.googleapis.com/v1beta"
    url = f"{base.rstrip('/')}/models/{handle.model_name}:generateContent"
    headers = {"x-goog-api-key": _auth(handle)}
    config: dict[str, Any] = {"temperature": request.temperature}
    if request.seed is not None:
        config["seed"] = request.seed
    body = {
        "systemInstruction": {"parts": [{"text": request.system}]},
        "contents": [{"role": "user", "parts": [{"text": request.user}]}],
        "generationConfig": config,
    }

    def parse(data: dict) -> tuple[str, dict[str, int]]:
        parts = data["candidates"][0]["content"]["parts"]
        usage = data.get("usageMetadata") or {}
        return "".join(p.get("text", "") for p in parts), {
            "prompt_tokens": int(usage.get("promptTokenCount", 0)),
            "completion_tokens": int(usage.get("candidatesTokenCount", 0)),
        }

    return url, headers, body, parse


_ADAPTERS = {"openai": _openai, "anthropic": _anthropic, "gemini": _gemini}
HTTP_PROVIDERS = tuple(sorted(_ADAPTERS))
