"""Retry/backoff behavior, scripted transport, and usage accounting."""

import os
import random

import pytest

from nextquery.errors import ConfigError
from nextquery.gateway import (
    BACKOFF_BASE_S,
    BACKOFF_CAP_S,
    BACKOFF_FACTOR,
    BackendConfig,
    CallRecord,
    HttpTransport,
    LlmClient,
    PermanentBackendError,
    ScriptRule,
    ScriptedBackend,
    TransportError,
    UnscriptedCallError,
    Usage,
    scripted_client,
    scripted_mock,
)

MSGS = [{"role": "user", "content": "hello"}]


def _client(rules, *, max_retries=3, sleeps=None):
    sleeper = sleeps.append if sleeps is not None else (lambda _s: None)
    return LlmClient(
        BackendConfig(max_retries=max_retries),
        transport=scripted_mock(rules),
        sleeper=sleeper,
        jitter_rng=random.Random(7),
    )


# --- config -----------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        {"timeout": 0.0},
        {"timeout": -1.0},
        {"max_retries": -1},
        {"max_parallel": 0},
        {"temperature": -0.1},
    ],
)
def test_backend_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        BackendConfig(**kwargs)


def test_usage_rejects_negative_counts():
    with pytest.raises(ValueError):
        Usage(input_tokens=-1, output_tokens=0)


# --- retries and backoff ------------------------------------------------------


def test_transient_failures_are_retried_until_success():
    client = _client(
        [
            ScriptRule(behavior="fail:429", times=1),
            ScriptRule(behavior="fail:503", times=1),
            ScriptRule(reply="done"),
        ]
    )
    out = client.chat(MSGS)
    assert out.text == "done"
    assert out.attempt_count == 3


def test_timeout_behaves_like_transient():
    client = _client([ScriptRule(behavior="timeout", times=2), ScriptRule(reply="ok")])
    assert client.chat(MSGS).attempt_count == 3


def test_retries_exhausted_raises_transport_error_with_last_status():
    client = _client([ScriptRule(behavior="fail:500")], max_retries=2)
    with pytest.raises(TransportError) as exc:
        client.chat(MSGS)
    assert exc.value.attempts == 3  # initial try + 2 retries
    assert exc.value.status == 500


def test_permanent_4xx_fails_immediately_without_sleeping():
    sleeps = []
    client = _client([ScriptRule(behavior="fail:400")], sleeps=sleeps)
    with pytest.raises(PermanentBackendError) as exc:
        client.chat(MSGS)
    assert exc.value.status == 400
    assert exc.value.attempts == 1
    assert sleeps == []


def test_429_is_retried_not_permanent():
    client = _client([ScriptRule(behavior="fail:429", times=1), ScriptRule(reply="ok")])
    assert client.chat(MSGS).text == "ok"


def test_backoff_delays_never_decrease_within_a_request():
    sleeps = []
    client = _client([ScriptRule(behavior="fail:503", times=5), ScriptRule(reply="ok")], max_retries=5, sleeps=sleeps)
    client.chat(MSGS)
    assert len(sleeps) == 5
    assert sleeps == sorted(sleeps)
    for i, delay in enumerate(sleeps):
        ceiling = min(BACKOFF_CAP_S, BACKOFF_BASE_S * BACKOFF_FACTOR**i)
        assert 0.0 <= delay <= max(ceiling, sleeps[i - 1] if i else 0.0)


def test_backoff_ceiling_is_capped():
    # enough attempts that the exponential ceiling would blow past the cap
    sleeps = []
    client = _client(
        [ScriptRule(behavior="fail:503", times=12), ScriptRule(reply="ok")],
        max_retries=12,
        sleeps=sleeps,
    )
    client.chat(MSGS)
    assert all(d <= BACKOFF_CAP_S for d in sleeps)


def test_zero_retries_means_single_attempt():
    client = _client([ScriptRule(behavior="fail:429")], max_retries=0)
    with pytest.raises(TransportError) as exc:
        client.chat(MSGS)
    assert exc.value.attempts == 1


# --- usage accounting ---------------------------------------------------------


def test_scripted_usage_counts_both_sides():
    client = scripted_client([ScriptRule(reply="three word reply")])
    out = client.chat([{"role": "user", "content": "one two"}])
    assert out.usage.input_tokens > 0
    assert out.usage.output_tokens > 0
    assert not out.usage.estimated


class _NoUsageTransport:
    def send(self, cfg, messages):
        from nextquery.gateway import _Reply

        return _Reply(text="bare reply", usage=None)


def test_missing_usage_falls_back_to_tokenizer_estimate():
    client = LlmClient(BackendConfig(), transport=_NoUsageTransport(), sleeper=lambda _s: None)
    out = client.chat(MSGS)
    assert out.usage.estimated
    assert out.usage.input_tokens > 0
    assert out.usage.output_tokens > 0


# --- scripted backend ---------------------------------------------------------


def test_rules_fire_in_order_and_respect_times():
    backend = scripted_mock([ScriptRule(reply="first", times=2), ScriptRule(reply="second")])
    cfg = BackendConfig()
    assert backend.send(cfg, MSGS).text == "first"
    assert backend.send(cfg, MSGS).text == "first"
    assert backend.send(cfg, MSGS).text == "second"


def test_substring_match_selects_rule():
    backend = scripted_mock(
        [
            ScriptRule(reply="judge path", match="Predicted query:"),
            ScriptRule(reply="default path"),
        ]
    )
    cfg = BackendConfig()
    assert backend.send(cfg, [{"role": "user", "content": "Predicted query: x"}]).text == "judge path"
    assert backend.send(cfg, MSGS).text == "default path"


def test_predicate_match_sees_all_messages():
    backend = scripted_mock(
        [ScriptRule(reply="long", match=lambda msgs: len(msgs) > 1), ScriptRule(reply="short")]
    )
    cfg = BackendConfig()
    assert backend.send(cfg, [{"role": "system", "content": "a"}, {"role": "user", "content": "b"}]).text == "long"
    assert backend.send(cfg, MSGS).text == "short"


def test_unscripted_call_raises():
    backend = scripted_mock([ScriptRule(reply="x", match="never-present")])
    with pytest.raises(UnscriptedCallError):
        backend.send(BackendConfig(), MSGS)


def test_exhausted_rule_is_skipped_then_unscripted():
    backend = scripted_mock([ScriptRule(reply="once", times=1)])
    cfg = BackendConfig()
    backend.send(cfg, MSGS)
    with pytest.raises(UnscriptedCallError):
        backend.send(cfg, MSGS)


def test_call_log_records_rule_index_and_outcome():
    backend = scripted_mock([ScriptRule(behavior="fail:429", times=1), ScriptRule(reply="ok")])
    client = LlmClient(BackendConfig(), transport=backend, sleeper=lambda _s: None)
    client.chat(MSGS)
    assert [c.rule_index for c in backend.calls] == [0, 1]
    assert [c.outcome for c in backend.calls] == ["fail:429", "ok"]
    assert all(isinstance(c, CallRecord) for c in backend.calls)


def test_unknown_scripted_behavior_is_config_error():
    backend = scripted_mock([ScriptRule(reply="x", behavior="explode")])
    with pytest.raises(ConfigError):
        backend.send(BackendConfig(), MSGS)


# --- http transport -----------------------------------------------------------


class _FakeResponse:
    def __init__(self, status_code, body=None, text=""):
        self.status_code = status_code
        self._body = body or {}
        self.text = text

    def json(self):
        return self._body


class _FakeSession:
    def __init__(self, responses):
        self._responses = list(responses)
        self.requests = []

    def post(self, url, headers=None, json=None, timeout=None):
        self.requests.append({"url": url, "headers": headers, "json": json, "timeout": timeout})
        return self._responses.pop(0)


def _http_client(responses, monkeypatch, **cfg_kwargs):
    monkeypatch.setenv("NEXTQUERY_API_KEY", "test-key")
    session = _FakeSession(responses)
    cfg = BackendConfig(base_url="https://api.example.test/v1", model="m-1", **cfg_kwargs)
    client = LlmClient(cfg, transport=HttpTransport(session=session), sleeper=lambda _s: None)
    return client, session


def test_http_success_parses_reply_and_usage(monkeypatch):
    body = {
        "choices": [{"message": {"content": "the reply"}}],
        "usage": {"prompt_tokens": 12, "completion_tokens": 5},
    }
    client, session = _http_client([_FakeResponse(200, body)], monkeypatch)
    out = client.chat(MSGS)
    assert out.text == "the reply"
    assert out.usage == Usage(input_tokens=12, output_tokens=5)
    req = session.requests[0]
    assert req["url"].endswith("/chat/completions")
    assert req["headers"]["Authorization"] == "Bearer test-key"
    assert req["json"]["model"] == "m-1"


def test_http_missing_usage_estimates(monkeypatch):
    body = {"choices": [{"message": {"content": "r"}}]}
    client, _ = _http_client([_FakeResponse(200, body)], monkeypatch)
    assert client.chat(MSGS).usage.estimated


def test_http_429_then_success(monkeypatch):
    body = {"choices": [{"message": {"content": "r"}}], "usage": {"prompt_tokens": 1, "completion_tokens": 1}}
    client, _ = _http_client([_FakeResponse(429), _FakeResponse(200, body)], monkeypatch)
    assert client.chat(MSGS).attempt_count == 2


def test_http_403_is_permanent(monkeypatch):
    client, _ = _http_client([_FakeResponse(403, text="forbidden")], monkeypatch)
    with pytest.raises(PermanentBackendError) as exc:
        client.chat(MSGS)
    assert exc.value.status == 403


def test_missing_api_key_is_permanent(monkeypatch):
    monkeypatch.delenv("NEXTQUERY_API_KEY", raising=False)
    client = LlmClient(
        BackendConfig(base_url="https://api.example.test"),
        transport=HttpTransport(session=_FakeSession([])),
        sleeper=lambda _s: None,
    )
    with pytest.raises(PermanentBackendError) as exc:
        client.chat(MSGS)
    assert exc.value.status == 401
