from __future__ import annotations

import json

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psyforge.gateway import (
    BACKOFF_JITTER,
    ChatRequest,
    Gateway,
    HttpBackend,
    LLMProviderHandle,
    MockProvider,
    ProviderError,
    ProviderTimeout,
    RateLimitExhausted,
    ResponseCache,
    RetriesExhausted,
    TokenBucket,
    TransientProviderError,
    cache_key,
    mock_gateway,
)


def req(user: str = "hi", tag: str = "t", **kw) -> ChatRequest:
    return ChatRequest(system="sys", user=user, tag=tag, **kw)


# ------------------------------------------------------------------ complete


def test_scripted_pass_through():
    gw = mock_gateway(MockProvider(by_prompt={"hi": "hello"}))
    resp = gw.complete(req("hi"))
    assert resp.text == "hello"
    assert resp.attempt_count == 1


def test_two_failures_then_success_counts_attempts():
    mock = MockProvider(
        by_tag={("t", 0): TransientProviderError("boom"), ("t", 1): TransientProviderError("boom")},
        fallback="ok",
    )
    resp = mock_gateway(mock, max_retries=3).complete(req())
    assert resp.text == "ok"
    assert resp.attempt_count == 3
    assert len(mock.calls) == 3


def test_zero_retries_fails_after_one_attempt():
    mock = MockProvider(fallback=TransientProviderError("down"))
    with pytest.raises(RetriesExhausted) as info:
        mock_gateway(mock, max_retries=0).complete(req())
    assert info.value.attempts == 1
    assert len(mock.calls) == 1


def test_attempts_bounded_by_one_plus_max_retries():
    mock = MockProvider(fallback=TransientProviderError("down"))
    with pytest.raises(RetriesExhausted) as info:
        mock_gateway(mock, max_retries=4).complete(req())
    assert info.value.attempts == 5 == len(mock.calls)


def test_fatal_error_is_not_retried():
    mock = MockProvider(fallback=ProviderError("bad request", 400))
    with pytest.raises(ProviderError):
        mock_gateway(mock, max_retries=3).complete(req())
    assert len(mock.calls) == 1


def test_persistent_429_surfaces_rate_limit_exhaustion():
    mock = MockProvider(fallback=TransientProviderError("slow down", 429))
    with pytest.raises(RateLimitExhausted):
        mock_gateway(mock, max_retries=2).complete(req())


def test_empty_text_is_retried():
    mock = MockProvider(by_tag={("t", 0): "   "}, fallback="real")
    resp = mock_gateway(mock).complete(req())
    assert resp.text == "real" and resp.attempt_count == 2


def test_backoff_sleeps_follow_exponential_schedule_with_jitter():
    slept: list[float] = []
    mock = MockProvider(fallback=TransientProviderError("down"))
    handle = LLMProviderHandle("mock", "m", rate_limit=6e6, max_retries=4)
    gw = Gateway(handle, mock, sleep=slept.append)
    with pytest.raises(RetriesExhausted):
        gw.complete(req())
    assert len(slept) == 4
    for k, s in enumerate(slept):
        nominal = 2.0**k
        assert nominal * (1 - BACKOFF_JITTER) <= s <= nominal * (1 + BACKOFF_JITTER)


def test_handle_rejects_bad_values():
    with pytest.raises(ValueError):
        LLMProviderHandle("x", "m", rate_limit=0)
    with pytest.raises(ValueError):
        LLMProviderHandle("x", "m", max_retries=-1)


def test_handle_never_carries_the_key(monkeypatch):
    monkeypatch.setenv("FORGE_OPENAI_KEY", "sk-secret-value")
    h = LLMProviderHandle("openai", "gpt")
    assert h.api_key() == "sk-secret-value"
    assert "sk-secret-value" not in json.dumps(h.to_dict())
    assert h.default_auth_env == "FORGE_OPENAI_KEY"


# ------------------------------------------------------------------ batch


def test_batch_preserves_order():
    mock = MockProvider(fallback=lambda r: f"echo {r.user}")
    reqs = [req(f"q{i}") for i in range(10)]
    out = mock_gateway(mock).complete_batch(reqs, parallelism=3)
    assert [r.text for r in out] == [f"echo q{i}" for i in range(10)]


def test_batch_empty():
    assert mock_gateway(MockProvider(fallback="x")).complete_batch([], parallelism=2) == []


def test_batch_collects_per_item_errors():
    mock = MockProvider(by_prompt={"q2": ProviderError("nope", 400)}, fallback="fine")
    out = mock_gateway(mock).complete_batch([req(f"q{i}") for i in range(5)], parallelism=2)
    assert [isinstance(r, ProviderError) for r in out] == [False, False, True, False, False]


def test_batch_rejects_zero_parallelism():
    with pytest.raises(ValueError):
        mock_gateway(MockProvider(fallback="x")).complete_batch([req()], parallelism=0)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(0, 30), par=st.integers(1, 8))
def test_batch_order_property(n, par):
    mock = MockProvider(fallback=lambda r: r.user[::-1])
    out = mock_gateway(mock).complete_batch([req(f"p{i}") for i in range(n)], parallelism=par)
    assert [r.text for r in out] == [f"p{i}"[::-1] for i in range(n)]


def test_in_flight_never_exceeds_parallelism():
    import threading
    import time

    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def slow(r):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.005)
        with lock:
            state["now"] -= 1
        return "ok"

    mock_gateway(MockProvider(fallback=slow)).complete_batch([req(f"{i}") for i in range(20)], parallelism=3)
    assert 1 <= state["peak"] <= 3


# ------------------------------------------------------------------ cache


def test_cache_hit_is_byte_identical(tmp_path):
    mock = MockProvider(fallback=lambda r: "réponse ✓ " + r.user)
    gw = mock_gateway(mock, cache=ResponseCache(tmp_path))
    first = gw.complete(req("x"))
    again = mock_gateway(MockProvider(), cache=ResponseCache(tmp_path)).complete(req("x"))
    assert again.text == first.text and again.cached
    assert len(mock.calls) == 1


def test_disabled_cache_always_misses(tmp_path):
    mock = MockProvider(fallback="x")
    gw = mock_gateway(mock, cache=ResponseCache(tmp_path, enabled=False))
    gw.complete(req())
    gw.complete(req())
    assert len(mock.calls) == 2


def test_corrupt_cache_entry_is_a_miss(tmp_path, caplog):
    cache = ResponseCache(tmp_path)
    r = req("y")
    key = cache_key("mock-model", r)
    cache.store(key, "good")
    path = tmp_path / key[:2] / f"{key}.json"
    path.write_text(json.dumps({"text": "tampered", "sha256": "0" * 64}))
    fresh = ResponseCache(tmp_path)
    assert fresh.lookup(key) is None
    path.write_text("{not json")
    assert ResponseCache(tmp_path).lookup(key) is None
    mock = MockProvider(fallback="regenerated")
    assert mock_gateway(mock, cache=ResponseCache(tmp_path)).complete(r).text == "regenerated"


def test_cache_key_sensitive_to_each_field():
    base = req("u", temperature=0.7, seed=1)
    keys = {
        cache_key("m", base),
        cache_key("m2", base),
        cache_key("m", ChatRequest("sys2", "u", 0.7, 1)),
        cache_key("m", ChatRequest("sys", "u2", 0.7, 1)),
        cache_key("m", ChatRequest("sys", "u", 0.0, 1)),
        cache_key("m", ChatRequest("sys", "u", 0.7, 2)),
        cache_key("m", ChatRequest("sys", "u", 0.7, None)),
    }
    assert len(keys) == 7
    assert len(cache_key("m", base)) * 4 >= 128


def test_distinct_prompts_have_distinct_keys_on_ten_thousand():
    keys = {cache_key("m", ChatRequest("s", f"prompt {i}")) for i in range(10_000)}
    assert len(keys) == 10_000


def test_tag_does_not_change_cache_key():
    assert cache_key("m", req("u", tag="a")) == cache_key("m", req("u", tag="b"))


# ------------------------------------------------------------------ token bucket


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self) -> float:
        return self.t

    def sleep(self, s: float) -> None:
        self.t += s


def test_token_bucket_spaces_requests():
    clock = FakeClock()
    bucket = TokenBucket(60, capacity=1, clock=clock, sleep=clock.sleep)
    waits = [bucket.acquire() for _ in range(4)]
    assert waits[0] == 0
    assert waits[1:] == pytest.approx([1.0, 1.0, 1.0])
    assert clock.t == pytest.approx(3.0)


def test_token_bucket_burst_then_refill():
    clock = FakeClock()
    bucket = TokenBucket(120, capacity=3, clock=clock, sleep=clock.sleep)
    assert [bucket.acquire() for _ in range(3)] == [0, 0, 0]
    assert bucket.acquire() == pytest.approx(0.5)


@given(st.floats(min_value=1, max_value=1e4), st.floats(min_value=0, max_value=1e6))
def test_token_bucket_terminates_on_virtual_time(rate, start):
    # Refilling by exactly the computed wait must always yield a token, even
    # when rounding leaves the balance just under one.
    clock = FakeClock()
    clock.t = start
    bucket = TokenBucket(rate, capacity=1, clock=clock, sleep=clock.sleep)
    for _ in range(50):
        bucket.acquire()
    assert clock.t - start == pytest.approx(49 * 60 / rate, rel=1e-6)


def test_token_bucket_max_wait_raises():
    clock = FakeClock()
    bucket = TokenBucket(1, capacity=1, max_wait=5, clock=clock, sleep=clock.sleep)
    bucket.acquire()
    with pytest.raises(RateLimitExhausted):
        bucket.acquire()


# ------------------------------------------------------------------ HTTP adapters


def _http(provider: str, handler, monkeypatch, **kw) -> Gateway:
    monkeypatch.setenv(f"FORGE_{provider.upper()}_KEY", "test-key")
    handle = LLMProviderHandle(provider, "model-x", rate_limit=6e6, **kw)
    backend = HttpBackend(httpx.Client(transport=httpx.MockTransport(handler)))
    return Gateway(handle, backend, sleep=lambda s: None)


def test_openai_wire_format(monkeypatch):
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["url"] = str(request.url)
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={
            "choices": [{"message": {"role": "assistant", "content": "pong"}}],
            "usage": {"prompt_tokens": 5, "completion_tokens": 1},
        })

    resp = _http("openai", handler, monkeypatch).complete(req("ping", seed=4, temperature=0.0))
    assert resp.text == "pong"
    assert resp.token_usage == {"prompt_tokens": 5, "completion_tokens": 1}
    assert seen["url"] == "https://api.openai.com/v1/chat/completions"
    assert seen["auth"] == "Bearer test-key"
    assert seen["body"] == {
        "model": "model-x",
        "messages": [{"role": "system", "content": "sys"}, {"role": "user", "content": "ping"}],
        "temperature": 0.0,
        "seed": 4,
    }


def test_anthropic_wire_format(monkeypatch):
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["url"] = str(request.url)
        seen["headers"] = request.headers
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={
            "content": [{"type": "text", "text": "po"}, {"type": "text", "text": "ng"}],
            "usage": {"input_tokens": 7, "output_tokens": 2},
        })

    resp = _http("anthropic", handler, monkeypatch).complete(req("ping"))
    assert resp.text == "pong"
    assert resp.token_usage == {"prompt_tokens": 7, "completion_tokens": 2}
    assert seen["url"] == "https://api.anthropic.com/v1/messages"
    assert seen["headers"]["x-api-key"] == "test-key"
    assert seen["headers"]["anthropic-version"] == "2023-06-01"
    assert seen["body"]["system"] == "sys"
    assert seen["body"]["messages"] == [{"role": "user", "content": "ping"}]


def test_gemini_wire_format(monkeypatch):
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["url"] = str(request.url)
        seen["key"] = request.headers["x-goog-api-key"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={
            "candidates": [{"content": {"parts": [{"text": "pong"}]}}],
            "usageMetadata": {"promptTokenCount": 3, "candidatesTokenCount": 1},
        })

    resp = _http("gemini", handler, monkeypatch, endpoint="http://local/v1beta/").complete(req("ping", seed=9))
    assert resp.text == "pong"
    assert seen["url"] == "http://local/v1beta/models/model-x:generateContent"
    assert seen["key"] == "test-key"
    assert seen["body"]["systemInstruction"] == {"parts": [{"text": "sys"}]}
    assert seen["body"]["generationConfig"] == {"temperature": 0.7, "seed": 9}


@pytest.mark.parametrize("status", [429, 500, 503])
def test_http_transient_statuses_are_retried(monkeypatch, status):
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(status, text="busy")
        return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

    resp = _http("openai", handler, monkeypatch, max_retries=3).complete(req())
    assert resp.text == "ok" and resp.attempt_count == 3


def test_http_400_is_fatal(monkeypatch):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad")

    with pytest.raises(ProviderError) as info:
        _http("openai", handler, monkeypatch).complete(req())
    assert info.value.status == 400 and len(calls) == 1


def test_http_timeout_is_transient(monkeypatch):
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    with pytest.raises(RetriesExhausted) as info:
        _http("openai", handler, monkeypatch, max_retries=1).complete(req())
    assert isinstance(info.value.last_error, ProviderTimeout)
    assert info.value.attempts == 2


def test_missing_key_is_fatal(monkeypatch):
    monkeypatch.delenv("FORGE_OPENAI_KEY", raising=False)
    handle = LLMProviderHandle("openai", "m", rate_limit=6e6)
    gw = Gateway(handle, HttpBackend(httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200)))),
                 sleep=lambda s: None)
    with pytest.raises(ProviderError, match="FORGE_OPENAI_KEY"):
        gw.complete(req())


def test_unknown_provider_has_no_adapter():
    gw = Gateway(LLMProviderHandle("nope", "m", rate_limit=6e6), HttpBackend(), sleep=lambda s: None)
    with pytest.raises(ProviderError, match="no HTTP adapter"):
        gw.complete(req())
