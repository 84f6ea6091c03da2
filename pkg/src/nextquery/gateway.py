"""Backend-agnostic chat-completion client.

Speaks the ubiquitous chat-completions JSON shape over HTTP, retries
transient failures with jittered exponential backoff, bounds in-flight
parallelism per backend, and records token usage for the efficiency ledger.
A deterministic scripted transport stands in for remote models in tests.
"""

from __future__ import annotations

import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import requests

from .conversation import DEFAULT_TOKENIZER, Tokenizer
from .errors import ConfigError

Message = dict  # {"role": str, "content": str}

BACKOFF_BASE_S = 0.5
BACKOFF_FACTOR = 2.0
BACKOFF_CAP_S = 30.0


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    """Retries exhausted on transient failures; carries the last status."""

    def __init__(self, message: str, status: Optional[int] = None, attempts: int = 0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class PermanentBackendError(GatewayError):
    """Non-retryable backend rejection (4xx other than 429)."""

    def __init__(self, message: str, status: Optional[int] = None, attempts: int = 1):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class UnscriptedCallError(GatewayError):
    """A scripted mock received a request no rule matches."""


@dataclass(frozen=True)
class BackendConfig:
    base_url: str = "mock://scripted"
    model: str = "scripted"
    api_key_env: str = "NEXTQUERY_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    max_parallel: int = 4
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ConfigError("timeout must be > 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.max_parallel < 1:
            raise ConfigError("max_parallel must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")


@dataclass(frozen=True)
class Usage:
    input_tokens: int
    output_tokens: int
    estimated: bool = False

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("usage token counts must be non-negative")


@dataclass(frozen=True)
class ChatExchange:
    messages: tuple[Message, ...]
    text: str
    usage: Usage
    latency_ms: float
    attempt_count: int


class _TransientFailure(Exception):
    def __init__(self, status: Optional[int] = None, reason: str = ""):
        super().__init__(reason or f"status {status}")
        self.status = status


class _PermanentFailure(Exception):
    def __init__(self, status: int, reason: str = ""):
        super().__init__(reason or f"status {status}")
        self.status = status


@dataclass(frozen=True)
class _Reply:
    text: str
    usage: Optional[Usage] = None


class HttpTransport:
    """POST {base_url}/chat/completions with bearer auth from the configured
    environment variable."""

    def __init__(self, session: Optional[requests.Session] = None):
        self._session = session or requests.Session()

    def send(self, cfg: BackendConfig, messages: Sequence[Message]) -> _Reply:
        key = os.environ.get(cfg.api_key_env)
        if not key:
            raise _PermanentFailure(401, f"api key env var {cfg.api_key_env} is not set")
        try:
            resp = self._session.post(
                cfg.base_url.rstrip("/") + "/chat/completions",
                headers={"Authorization": f"Bearer {key}"},
                json={"model": cfg.model, "messages": list(messages), "temperature": cfg.temperature},
                timeout=cfg.timeout,
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise _TransientFailure(reason=str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _TransientFailure(status=resp.status_code)
        if resp.status_code >= 400:
            raise _PermanentFailure(status=resp.status_code, reason=resp.text[:200])
        body = resp.json()
        text = body["choices"][0]["message"]["content"]
        usage = None
        if isinstance(body.get("usage"), dict):
            usage = Usage(
                input_tokens=int(body["usage"].get("prompt_tokens", 0)),
                output_tokens=int(body["usage"].get("completion_tokens", 0)),
            )
        return _Reply(text=text, usage=usage)


# --- scripted mock ----------------------------------------------------------

Matcher = Union[None, str, Callable[[Sequence[Message]], bool]]


@dataclass
class ScriptRule:
    """One scripted behavior. ``match`` is None (any request), a substring of
    the concatenated message contents, or a predicate over the messages.
    ``behavior`` is "ok", "fail:<status>", or "timeout". ``times`` bounds how
    often the rule fires (None = unlimited)."""

    reply: str = ""
    match: Matcher = None
    behavior: str = "ok"
    times: Optional[int] = None


@dataclass(frozen=True)
class CallRecord:
    messages: tuple[Message, ...]
    rule_index: int
    outcome: str  # "ok", "fail:<status>", "timeout"


class ScriptedBackend:
    """Deterministic transport replying from an ordered rule list.

    Each call consumes the first non-exhausted matching rule. Unmatched
    requests raise UnscriptedCallError so tests fail loudly. The call log is
    internally synchronized; identical scripts and call sequences yield
    identical logs.
    """

    def __init__(self, rules: Sequence[ScriptRule], tokenizer: Tokenizer = DEFAULT_TOKENIZER):
        self._rules = list(rules)
        self._remaining = [r.times for r in self._rules]
        self._tokenizer = tokenizer
        self._lock = threading.Lock()
        self.calls: list[CallRecord] = []

    @staticmethod
    def _matches(rule: ScriptRule, messages: Sequence[Message]) -> bool:
        if rule.match is None:
            return True
        if isinstance(rule.match, str):
            blob = "\n".join(str(m.get("content", "")) for m in messages)
            return rule.match in blob
        return bool(rule.match(messages))

    def send(self, cfg: BackendConfig, messages: Sequence[Message]) -> _Reply:
        with self._lock:
            for i, rule in enumerate(self._rules):
                if self._remaining[i] == 0 or not self._matches(rule, messages):
                    continue
                if self._remaining[i] is not None:
                    self._remaining[i] -= 1
                self.calls.append(CallRecord(tuple(messages), i, rule.behavior))
                if rule.behavior == "ok":
                    usage = Usage(
                        input_tokens=sum(self._tokenizer.count(str(m.get("content", ""))) for m in messages),
                        output_tokens=self._tokenizer.count(rule.reply),
                    )
                    return _Reply(text=rule.reply, usage=usage)
                if rule.behavior == "timeout":
                    raise _TransientFailure(reason="scripted timeout")
                if rule.behavior.startswith("fail:"):
                    status = int(rule.behavior.split(":", 1)[1])
                    if status == 429 or status >= 500:
                        raise _TransientFailure(status=status)
                    raise _PermanentFailure(status=status)
                raise ConfigError(f"unknown scripted behavior {rule.behavior!r}")
        preview = " | ".join(str(m.get("content", ""))[:60] for m in messages)
        raise UnscriptedCallError(f"no script rule matches request: {preview}")


def scripted_mock(rules: Sequence[ScriptRule], tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> ScriptedBackend:
    return ScriptedBackend(rules, tokenizer=tokenizer)


# --- client -----------------------------------------------------------------


class LlmClient:
    """Chat-completion client with retries, backoff, and bounded parallelism.

    Safe to call from many threads; in-flight requests are limited to
    cfg.max_parallel by an admission semaphore. Backoff is full jitter
    clamped to the previous delay, so delays never decrease across the
    attempts of one request.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        transport=None,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
        sleeper: Callable[[float], None] = time.sleep,
        jitter_rng: Optional[random.Random] = None,
    ):
        self.cfg = cfg
        self._transport = transport if transport is not None else HttpTransport()
        self._tokenizer = tokenizer
        self._sleep = sleeper
        self._rng = jitter_rng or random.Random()
        self._gate = threading.BoundedSemaphore(cfg.max_parallel)

    def chat(self, messages: Sequence[Message]) -> ChatExchange:
        cfg = self.cfg
        attempts = 0
        prev_delay = 0.0
        start = time.perf_counter()
        while True:
            attempts += 1
            try:
                with self._gate:
                    reply = self._transport.send(cfg, messages)
            except _PermanentFailure as exc:
                raise PermanentBackendError(str(exc), status=exc.status, attempts=attempts) from exc
            except _TransientFailure as exc:
                if attempts >= cfg.max_retries + 1:
                    raise TransportError(
                        f"giving up after {attempts} attempts: {exc}",
                        status=exc.status,
                        attempts=attempts,
                    ) from exc
                ceiling = min(BACKOFF_CAP_S, BACKOFF_BASE_S * BACKOFF_FACTOR ** (attempts - 1))
                delay = max(prev_delay, self._rng.uniform(0.0, ceiling))
                prev_delay = delay
                self._sleep(delay)
                continue
            latency_ms = (time.perf_counter() - start) * 1000.0
            usage = reply.usage
            if usage is None:
                usage = Usage(
                    input_tokens=sum(self._tokenizer.count(str(m.get("content", ""))) for m in messages),
                    output_tokens=self._tokenizer.count(reply.text),
                    estimated=True,
                )
            return ChatExchange(
                messages=tuple(messages),
                text=reply.text,
                usage=usage,
                latency_ms=latency_ms,
                attempt_count=attempts,
            )


def scripted_client(
    rules: Sequence[ScriptRule],
    cfg: Optional[BackendConfig] = None,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> LlmClient:
    """LlmClient over a fresh scripted transport; no sleeping on retries."""
    return LlmClient(
        cfg or BackendConfig(),
        transport=scripted_mock(rules, tokenizer=tokenizer),
        tokenizer=tokenizer,
        sleeper=lambda _s: None,
        jitter_rng=random.Random(0),
    )
