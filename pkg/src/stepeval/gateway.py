"""Uniform chat-completions access to target and judge models.

One :class:`ModelGateway` fronts every model the toolkit talks to. It owns
per-endpoint admission (a semaphore bounding in-flight requests and a
sliding-window rate limiter), a retry loop with exponential backoff for
transient failures, and the :class:`CallLedger` that keeps exact counts of
generation and judge calls. Transports are pluggable: :class:`HttpTransport`
speaks OpenAI-style chat-completions JSON over HTTPS, and
:class:`MockTransport` replays scripted responses deterministically for
offline tests.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Protocol, Sequence, Union

import httpx

from .core import ImageKind, ImageRef

GENERATION = "generation"
JUDGE = "judge"
PURPOSES = (GENERATION, JUDGE)

RATE_WINDOW_SECONDS = 60.0


class GatewayError(Exception):
    """Base class for everything the gateway can raise."""


class TransportError(GatewayError):
    """Transient failures outlasted the retry budget."""


class ProtocolError(GatewayError):
    """The backend answered with a terminal non-2xx status."""

    def __init__(self, status: int, body_excerpt: str):
        super().__init__(f"backend returned status {status}: {body_excerpt}")
        self.status = status
        self.body_excerpt = body_excerpt


class MockScriptError(GatewayError):
    """A request had no script, or its script ran out of responses."""


class _TransientFailure(Exception):
    """Internal marker for a retryable attempt (429/5xx/timeout)."""


# ---------------------------------------------------------------------------
# Clock abstraction (virtual in tests, real otherwise)


class Clock(Protocol):
    def monotonic(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock:
    """Manually advanced clock; sleep() jumps time instead of waiting."""

    def __init__(self, start: float = 0.0):
        self._now = start
        self._lock = threading.Lock()

    def monotonic(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        self.advance(max(seconds, 0.0))

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._now += seconds


# ---------------------------------------------------------------------------
# Request / response values


@dataclass(frozen=True, slots=True)
class TextPart:
    text: str


@dataclass(frozen=True, slots=True)
class ImagePart:
    image: ImageRef


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True, slots=True)
class ChatMessage:
    role: str
    parts: tuple[Part, ...]

    @classmethod
    def text(cls, role: str, text: str) -> "ChatMessage":
        return cls(role=role, parts=(TextPart(text),))


@dataclass(frozen=True, slots=True)
class SchemaRef:
    """Named JSON schema for backends with constrained decoding."""

    name: str
    payload: dict


@dataclass(frozen=True, slots=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    max_tokens: int
    temperature: float
    system: Optional[str] = None
    n: int = 1
    response_schema: Optional[SchemaRef] = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.n < 1:
            raise ValueError("candidate count n must be >= 1")

    def with_n(self, n: int) -> "ChatRequest":
        return ChatRequest(
            messages=self.messages,
            max_tokens=self.max_tokens,
            temperature=self.temperature,
            system=self.system,
            n=n,
            response_schema=self.response_schema,
        )


@dataclass(frozen=True, slots=True)
class Candidate:
    text: str
    logprob_sum: Optional[float] = None
    token_count: Optional[int] = None


@dataclass(frozen=True, slots=True)
class ChatResponse:
    candidates: tuple[Candidate, ...]
    model_id: str
    latency: float
    request_id: str

    def __post_init__(self) -> None:
        if not self.candidates:
            raise ValueError("a chat response carries at least one candidate")

    @property
    def text(self) -> str:
        return self.candidates[0].text


@dataclass(frozen=True, slots=True)
class EndpointConfig:
    """Where and how to reach one model. API keys stay in the environment."""

    base_url: str
    model_id: str
    api_key_env: str = ""
    max_in_flight: int = 4
    requests_per_minute: int = 600
    max_retries: int = 2
    timeout: float = 60.0
    supports_multi_sample: bool = True
    want_logprobs: bool = False

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.requests_per_minute < 1:
            raise ValueError("requests_per_minute must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def key(self) -> tuple[str, str]:
        return (self.base_url, self.model_id)

    def redacted(self) -> dict[str, Any]:
        """Config echo safe for manifests and logs (key values never appear)."""
        return {
            "base_url": self.base_url,
            "model_id": self.model_id,
            "api_key_env": self.api_key_env,
            "max_in_flight": self.max_in_flight,
            "requests_per_minute": self.requests_per_minute,
            "max_retries": self.max_retries,
            "timeout": self.timeout,
            "supports_multi_sample": self.supports_multi_sample,
            "want_logprobs": self.want_logprobs,
        }


def request_text(request: ChatRequest) -> str:
    """All text carried by a request, system first, in message order."""
    chunks: list[str] = []
    if request.system:
        chunks.append(request.system)
    for message in request.messages:
        for part in message.parts:
            if isinstance(part, TextPart):
                chunks.append(part.text)
    return "\n".join(chunks)


def request_hash(request: ChatRequest) -> str:
    return hashlib.sha256(request_text(request).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Call ledger


@dataclass(frozen=True, slots=True)
class LedgerSnapshot:
    generation_calls: int = 0
    judge_calls: int = 0
    retried_calls: int = 0

    def __sub__(self, other: "LedgerSnapshot") -> "LedgerSnapshot":
        return LedgerSnapshot(
            generation_calls=self.generation_calls - other.generation_calls,
            judge_calls=self.judge_calls - other.judge_calls,
            retried_calls=self.retried_calls - other.retried_calls,
        )

    def __add__(self, other: "LedgerSnapshot") -> "LedgerSnapshot":
        return LedgerSnapshot(
            generation_calls=self.generation_calls + other.generation_calls,
            judge_calls=self.judge_calls + other.judge_calls,
            retried_calls=self.retried_calls + other.retried_calls,
        )

    @property
    def total_calls(self) -> int:
        return self.generation_calls + self.judge_calls

    def to_dict(self) -> dict[str, int]:
        return {
            "generation_calls": self.generation_calls,
            "judge_calls": self.judge_calls,
            "retried_calls": self.retried_calls,
        }


@dataclass(frozen=True, slots=True)
class LedgerRecord:
    endpoint: tuple[str, str]
    purpose: str
    wall_time: float


class CallLedger:
    """Monotone counters of model calls by purpose, updated atomically.

    One record is appended per logical model call, so
    ``len(records) == generation_calls + judge_calls`` always holds. A
    multi-sample request for n candidates counts as n logical calls,
    keeping accounting independent of whether the backend supports n>1.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._generation = 0
        self._judge = 0
        self._retried = 0
        self._records: list[LedgerRecord] = []

    def record_calls(
        self, purpose: str, endpoint: EndpointConfig, count: int, wall_time: float
    ) -> None:
        if purpose not in PURPOSES:
            raise ValueError(f"unknown call purpose: {purpose!r}")
        with self._lock:
            if purpose == GENERATION:
                self._generation += count
            else:
                self._judge += count
            for _ in range(count):
                self._records.append(
                    LedgerRecord(endpoint.key(), purpose, wall_time)
                )

    def record_retry(self) -> None:
        with self._lock:
            self._retried += 1

    @property
    def generation_calls(self) -> int:
        with self._lock:
            return self._generation

    @property
    def judge_calls(self) -> int:
        with self._lock:
            return self._judge

    @property
    def retried_calls(self) -> int:
        with self._lock:
            return self._retried

    @property
    def records(self) -> tuple[LedgerRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def snapshot(self) -> LedgerSnapshot:
        with self._lock:
            return LedgerSnapshot(self._generation, self._judge, self._retried)


# ---------------------------------------------------------------------------
# Transports


class Transport(Protocol):
    def send(self, endpoint: EndpointConfig, request: ChatRequest) -> ChatResponse: ...


@dataclass(frozen=True, slots=True)
class MockReply:
    """One canned response: candidate texts plus optional logprob data."""

    texts: tuple[str, ...]
    logprob_sums: Optional[tuple[float, ...]] = None
    token_counts: Optional[tuple[int, ...]] = None

    @classmethod
    def text(
        cls,
        text: str,
        logprob_sum: Optional[float] = None,
        token_count: Optional[int] = None,
    ) -> "MockReply":
        return cls(
            texts=(text,),
            logprob_sums=(logprob_sum,) if logprob_sum is not None else None,
            token_counts=(token_count,) if token_count is not None else None,
        )

    def candidates(self) -> tuple[Candidate, ...]:
        out = []
        for i, text in enumerate(self.texts):
            out.append(
                Candidate(
                    text=text,
                    logprob_sum=self.logprob_sums[i] if self.logprob_sums else None,
                    token_count=self.token_counts[i] if self.token_counts else None,
                )
            )
        return tuple(out)


@dataclass(frozen=True, slots=True)
class MockFailure:
    """Scripted failure. Transient failures feed the retry loop; terminal
    ones surface as protocol errors."""

    transient: bool = True
    status: int = 503
    body: str = "scripted failure"


ScriptEntry = Union[MockReply, MockFailure]
Matcher = Callable[[ChatRequest], bool]


def match_exact(reference: Union[ChatRequest, str]) -> Matcher:
    """Default matcher: exact hash of the request's concatenated text."""
    if isinstance(reference, ChatRequest):
        wanted = request_hash(reference)
    else:
        wanted = hashlib.sha256(reference.encode("utf-8")).hexdigest()

    def matcher(request: ChatRequest) -> bool:
        return request_hash(request) == wanted

    return matcher


def match_substring(needle: str) -> Matcher:
    def matcher(request: ChatRequest) -> bool:
        return needle in request_text(request)

    return matcher


def match_system_contains(needle: str) -> Matcher:
    def matcher(request: ChatRequest) -> bool:
        return bool(request.system) and needle in request.system

    return matcher


def match_all(*matchers: Matcher) -> Matcher:
    def matcher(request: ChatRequest) -> bool:
        return all(m(request) for m in matchers)

    return matcher


class MockRoute:
    """Handle returned by scripting; exposes how much script is left."""

    def __init__(self, matcher: Matcher, entries: Sequence[ScriptEntry]):
        self.matcher = matcher
        self._entries = deque(entries)
        self.consumed = 0

    @property
    def remaining(self) -> int:
        return len(self._entries)

    def pop(self) -> ScriptEntry:
        entry = self._entries.popleft()
        self.consumed += 1
        return entry


class MockTransport:
    """Deterministic scripted backend for offline tests.

    Routes are checked in registration order; the first matching route
    serves its responses in order. A matching route with an empty script
    raises (catches over-calling); an unmatched request raises naming the
    request hash. Candidate counts in replies are taken as-is so tests can
    exercise multi-sample responses.
    """

    def __init__(self) -> None:
        self._routes: list[MockRoute] = []
        self._lock = threading.Lock()
        self._sequence = 0

    def script(
        self,
        matcher: Union[Matcher, str, ChatRequest],
        entries: Sequence[ScriptEntry],
    ) -> MockRoute:
        if isinstance(matcher, (str, ChatRequest)):
            matcher = match_exact(matcher)
        route = MockRoute(matcher, entries)
        with self._lock:
            self._routes.append(route)
        return route

    def script_texts(
        self, matcher: Union[Matcher, str, ChatRequest], texts: Sequence[str]
    ) -> MockRoute:
        return self.script(matcher, [MockReply.text(t) for t in texts])

    def send(self, endpoint: EndpointConfig, request: ChatRequest) -> ChatResponse:
        with self._lock:
            route = next(
                (r for r in self._routes if r.matcher(request)), None
            )
            if route is None:
                raise MockScriptError(
                    f"no script for request {request_hash(request)}"
                )
            if route.remaining == 0:
                raise MockScriptError(
                    f"script exhausted for request {request_hash(request)}"
                )
            entry = route.pop()
            self._sequence += 1
            sequence = self._sequence
        if isinstance(entry, MockFailure):
            if entry.transient:
                raise _TransientFailure(f"scripted transient failure {entry.status}")
            raise ProtocolError(entry.status, entry.body)
        return ChatResponse(
            candidates=entry.candidates(),
            model_id=endpoint.model_id,
            latency=0.0,
            request_id=f"mock-{sequence}",
        )


def _image_part_payload(image: ImageRef) -> dict[str, Any]:
    if image.kind is ImageKind.URL:
        url = image.value
    elif image.kind is ImageKind.INLINE_BASE64:
        url = f"data:{image.media_type};base64,{image.value}"
    else:
        import base64

        raw = Path(image.value).read_bytes()
        encoded = base64.b64encode(raw).decode("ascii")
        media = image.media_type or "image/png"
        url = f"data:{media};base64,{encoded}"
    return {"type": "image_url", "image_url": {"url": url}}


class HttpTransport:
    """OpenAI-style chat-completions over HTTP(S) via httpx."""

    def __init__(self) -> None:
        self._client = httpx.Client()

    def close(self) -> None:
        self._client.close()

    def send(self, endpoint: EndpointConfig, request: ChatRequest) -> ChatResponse:
        payload = self._payload(endpoint, request)
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(endpoint.api_key_env, "") if endpoint.api_key_env else ""
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        url = endpoint.base_url.rstrip("/") + "/chat/completions"
        started = time.monotonic()
        try:
            response = self._client.post(
                url, json=payload, headers=headers, timeout=endpoint.timeout
            )
        except httpx.TimeoutException as exc:
            raise _TransientFailure(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise _TransientFailure(f"transport: {exc}") from exc
        latency = time.monotonic() - started
        if response.status_code == 429 or response.status_code >= 500:
            raise _TransientFailure(f"status {response.status_code}")
        if response.status_code < 200 or response.status_code >= 300:
            raise ProtocolError(response.status_code, response.text[:200])
        try:
            body = response.json()
            candidates = self._parse_choices(body)
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ProtocolError(
                response.status_code, f"malformed completion body: {exc}"
            ) from exc
        return ChatResponse(
            candidates=candidates,
            model_id=body.get("model", endpoint.model_id),
            latency=latency,
            request_id=body.get("id", response.headers.get("x-request-id", "")),
        )

    @staticmethod
    def _payload(endpoint: EndpointConfig, request: ChatRequest) -> dict[str, Any]:
        messages: list[dict[str, Any]] = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        for message in request.messages:
            content: list[dict[str, Any]] = []
            for part in message.parts:
                if isinstance(part, TextPart):
                    content.append({"type": "text", "text": part.text})
                else:
                    content.append(_image_part_payload(part.image))
            messages.append({"role": message.role, "content": content})
        payload: dict[str, Any] = {
            "model": endpoint.model_id,
            "messages": messages,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if request.n > 1:
            payload["n"] = request.n
        if endpoint.want_logprobs:
            payload["logprobs"] = True
        if request.response_schema is not None:
            payload["response_format"] = request.response_schema.payload
        return payload

    @staticmethod
    def _parse_choices(body: dict[str, Any]) -> tuple[Candidate, ...]:
        candidates: list[Candidate] = []
        for choice in body["choices"]:
            text = choice["message"]["content"] or ""
            logprob_sum = None
            token_count = None
            logprobs = choice.get("logprobs") or {}
            tokens = logprobs.get("content") or []
            if tokens:
                logprob_sum = sum(t["logprob"] for t in tokens)
                token_count = len(tokens)
            candidates.append(
                Candidate(text=text, logprob_sum=logprob_sum, token_count=token_count)
            )
        if not candidates:
            raise ValueError("no choices in completion body")
        return tuple(candidates)


# ---------------------------------------------------------------------------
# Rate limiting and the gateway


class SlidingWindowLimiter:
    """Allows at most ``rate`` dispatches inside any 60-second window."""

    def __init__(self, rate: int, clock: Clock):
        self._rate = rate
        self._clock = clock
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock.monotonic()
                while self._stamps and now - self._stamps[0] >= RATE_WINDOW_SECONDS:
                    self._stamps.popleft()
                if len(self._stamps) < self._rate:
                    self._stamps.append(now)
                    return
                wait = self._stamps[0] + RATE_WINDOW_SECONDS - now
            self._clock.sleep(wait)


class _EndpointState:
    def __init__(self, endpoint: EndpointConfig, clock: Clock):
        self.semaphore = threading.BoundedSemaphore(endpoint.max_in_flight)
        self.limiter = SlidingWindowLimiter(endpoint.requests_per_minute, clock)


class ModelGateway:
    """Front door for every model call the toolkit makes.

    ``complete`` is safe for concurrent callers. Passing a ``scope`` ledger
    mirrors that call's accounting into a caller-owned ledger, which is how
    per-sample call deltas stay exact when many samples run concurrently.
    """

    def __init__(
        self,
        transport: Optional[Transport] = None,
        clock: Optional[Clock] = None,
        backoff_base: float = 0.5,
        wire_log: Optional[Path] = None,
    ):
        self.transport: Transport = transport if transport is not None else HttpTransport()
        self.clock: Clock = clock if clock is not None else SystemClock()
        self.ledger = CallLedger()
        self._backoff_base = backoff_base
        self._states: dict[tuple[str, str], _EndpointState] = {}
        self._states_lock = threading.Lock()
        self._wire_log = wire_log
        self._wire_log_lock = threading.Lock()

    def _state(self, endpoint: EndpointConfig) -> _EndpointState:
        key = endpoint.key()
        with self._states_lock:
            state = self._states.get(key)
            if state is None:
                state = _EndpointState(endpoint, self.clock)
                self._states[key] = state
            return state

    def complete(
        self,
        endpoint: EndpointConfig,
        request: ChatRequest,
        purpose: str,
        scope: Optional[CallLedger] = None,
    ) -> ChatResponse:
        """Send one chat request, retrying transient failures with backoff.

        The ledger gains ``request.n`` calls under ``purpose`` on success.
        Backends without multi-sample support are fanned out into n parallel
        single-sample requests; survivors are merged, so the response may
        carry fewer than n candidates if some of the fan-out failed.
        """
        if purpose not in PURPOSES:
            raise ValueError(f"unknown call purpose: {purpose!r}")
        if request.n > 1 and not endpoint.supports_multi_sample:
            return self._fan_out(endpoint, request, purpose, scope)
        started = self.clock.monotonic()
        response = self._send_with_retries(endpoint, request, scope)
        if len(response.candidates) != request.n:
            # multi-sample backends must honor n; anything else would let
            # the ledger drift from the candidates actually produced
            raise ProtocolError(
                200,
                f"backend returned {len(response.candidates)} candidates "
                f"for n={request.n}",
            )
        wall = self.clock.monotonic() - started
        self.ledger.record_calls(purpose, endpoint, request.n, wall)
        if scope is not None:
            scope.record_calls(purpose, endpoint, request.n, wall)
        self._log_exchange(endpoint, request, purpose, response)
        return response

    def _fan_out(
        self,
        endpoint: EndpointConfig,
        request: ChatRequest,
        purpose: str,
        scope: Optional[CallLedger],
    ) -> ChatResponse:
        single = request.with_n(1)
        outcomes: list[Optional[ChatResponse]] = [None] * request.n
        errors: list[GatewayError] = []

        def one(slot: int) -> None:
            try:
                outcomes[slot] = self.complete(endpoint, single, purpose, scope)
            except GatewayError as exc:
                errors.append(exc)

        with ThreadPoolExecutor(max_workers=request.n) as pool:
            futures = [pool.submit(one, i) for i in range(request.n)]
            for future in futures:
                future.result()
        survivors = [r for r in outcomes if r is not None]
        if not survivors:
            raise TransportError(
                f"all {request.n} fan-out requests failed; first error: {errors[0]}"
            )
        candidates = tuple(c for r in survivors for c in r.candidates)
        return ChatResponse(
            candidates=candidates,
            model_id=survivors[0].model_id,
            latency=max(r.latency for r in survivors),
            request_id=survivors[0].request_id,
        )

    def _send_with_retries(
        self,
        endpoint: EndpointConfig,
        request: ChatRequest,
        scope: Optional[CallLedger],
    ) -> ChatResponse:
        state = self._state(endpoint)
        retries = 0
        while True:
            state.limiter.acquire()
            with state.semaphore:
                try:
                    return self.transport.send(endpoint, request)
                except _TransientFailure as exc:
                    failure = exc
            if retries >= endpoint.max_retries:
                raise TransportError(
                    f"retries exhausted after {retries} retries: {failure}"
                )
            retries += 1
            self.ledger.record_retry()
            if scope is not None:
                scope.record_retry()
            self.clock.sleep(self._backoff_base * (2 ** (retries - 1)))

    def _log_exchange(
        self,
        endpoint: EndpointConfig,
        request: ChatRequest,
        purpose: str,
        response: ChatResponse,
    ) -> None:
        if self._wire_log is None:
            return
        record = {
            "endpoint": endpoint.base_url,
            "model": endpoint.model_id,
            "purpose": purpose,
            "n": request.n,
            "request_hash": request_hash(request),
            "request_id": response.request_id,
            "candidates": [c.text for c in response.candidates],
            "latency": response.latency,
        }
        line = json.dumps(record, ensure_ascii=False)
        with self._wire_log_lock:
            with open(self._wire_log, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
