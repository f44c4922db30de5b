"""Semi-automatic benchmark creation with human verification.

Candidate reasoning chains are generated by a model from a fixed system
prompt and then reviewed by people. Review is an event-sourced state
machine: every change is an append-only event (edit a step, add one, remove
one, fix the final answer, accept, reject), the current state of a sample is
the fold of its events over the generated candidate, and replaying the log
from scratch reproduces every state bit-exactly. That is what makes the
"fraction corrected" statistic and the audit trail derivable after the fact.

Accepting a sample re-runs full validation, so the minimum-step rule cannot
be bypassed by review; a reviewer has to add the missing steps first.
"""

from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from .core import (
    BenchmarkSample,
    Category,
    ImageRef,
    ReasoningChain,
    VerificationState,
    validate_sample,
)
from .gateway import (
    GENERATION,
    CallLedger,
    ChatMessage,
    ChatRequest,
    Clock,
    EndpointConfig,
    GatewayError,
    ImagePart,
    ModelGateway,
    SystemClock,
    TextPart,
)
from .judging import CHAIN_GENERATION_SYSTEM_PROMPT

GENERATION_MAX_TOKENS = 1024
GENERATION_TEMPERATURE = 0.0

EVENT_GENERATED = "Generated"
EVENT_EDITED_STEP = "EditedStep"
EVENT_STEP_ADDED = "StepAdded"
EVENT_STEP_REMOVED = "StepRemoved"
EVENT_FINAL_ANSWER_EDITED = "FinalAnswerEdited"
EVENT_ACCEPTED = "Accepted"
EVENT_REJECTED = "Rejected"

EVENT_KINDS = (
    EVENT_GENERATED,
    EVENT_EDITED_STEP,
    EVENT_STEP_ADDED,
    EVENT_STEP_REMOVED,
    EVENT_FINAL_ANSWER_EDITED,
    EVENT_ACCEPTED,
    EVENT_REJECTED,
)

EDIT_KINDS = (
    EVENT_EDITED_STEP,
    EVENT_STEP_ADDED,
    EVENT_STEP_REMOVED,
    EVENT_FINAL_ANSWER_EDITED,
)

DEFAULT_LEASE_TTL = 15 * 60.0

_MARKER_RE = re.compile(r"^[ \t]*(Step|Action)[ \t]+(\d+)[ \t]*:", re.MULTILINE)
_FINAL_ANSWER_RE = re.compile(r"^[ \t]*Final Answer[ \t]*:", re.MULTILINE)


class GenerationParseError(Exception):
    """The model reply does not follow the step/action/final-answer layout."""


class IllegalEventError(Exception):
    """Event rejected: illegal transition or invalid payload.

    ``reason`` is a stable code ("illegal-transition", "min-steps",
    "bad-step-index", ...) suitable for API responses.
    """

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


class LeaseConflict(Exception):
    """The sample is already leased by another reviewer."""


class UnknownSampleError(KeyError):
    pass


@dataclass(frozen=True, slots=True)
class GenerationTask:
    sample_id: str
    question: str
    image: ImageRef
    target_endpoint: EndpointConfig
    choices: Optional[tuple[str, ...]] = None

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("generation task question must be non-empty")


@dataclass(frozen=True, slots=True)
class SampleStub:
    """Everything known about a sample before a chain exists."""

    id: str
    category: Category
    question: str
    image: ImageRef
    choices: Optional[tuple[str, ...]] = None
    provenance: str = ""
    min_step_exempt: bool = False


@dataclass(frozen=True, slots=True)
class VerificationEvent:
    sample_id: str
    kind: str
    payload: Mapping[str, Any]
    actor: str
    ts: float

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind: {self.kind!r}")
        object.__setattr__(self, "payload", dict(self.payload))

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "kind": self.kind,
            "payload": dict(self.payload),
            "actor": self.actor,
            "ts": self.ts,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VerificationEvent":
        return cls(
            sample_id=data["sample_id"],
            kind=data["kind"],
            payload=data.get("payload", {}),
            actor=data.get("actor", ""),
            ts=float(data.get("ts", 0.0)),
        )


@dataclass(frozen=True, slots=True)
class CurationState:
    """Materialized view of one sample: fold of its events over the stub."""

    stub: SampleStub
    verification_state: VerificationState
    chain: Optional[ReasoningChain]
    edit_count: int

    def sample(self) -> BenchmarkSample:
        if self.chain is None:
            raise ValueError(f"sample {self.stub.id!r} has no chain yet")
        return BenchmarkSample(
            id=self.stub.id,
            category=self.stub.category,
            question=self.stub.question,
            choices=self.stub.choices,
            image=self.stub.image,
            ground_truth=self.chain,
            min_step_exempt=self.stub.min_step_exempt,
            verification_state=self.verification_state,
            provenance=self.stub.provenance,
        )


@dataclass(frozen=True, slots=True)
class CurationStats:
    total: int
    accepted: int
    rejected: int
    fraction_with_any_edit: float
    total_steps: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "fraction_with_any_edit": self.fraction_with_any_edit,
            "total_steps": self.total_steps,
        }


@dataclass(frozen=True, slots=True)
class ReviewLease:
    sample_id: str
    reviewer: str
    expires_at: float


def parse_generated_chain(text: str) -> ReasoningChain:
    """Parse the step/action layout the generation prompt asks for.

    Step and Action texts sharing a number merge into one reasoning step.
    Everything after the last "Final Answer:" marker is the final answer;
    "None of the choices provided" is as valid an answer as any other.
    """
    final_matches = list(_FINAL_ANSWER_RE.finditer(text))
    if not final_matches:
        raise GenerationParseError('reply has no "Final Answer:" line')
    final_marker = final_matches[-1]
    final_answer = text[final_marker.end():].strip()
    if not final_answer:
        raise GenerationParseError("final answer is empty")

    body = text[: final_marker.start()]
    markers = list(_MARKER_RE.finditer(body))
    if not markers:
        raise GenerationParseError("reply has no Step lines")

    # number -> [step text, action text], numbers kept in appearance order
    merged: dict[int, list[str]] = {}
    order: list[int] = []
    for i, marker in enumerate(markers):
        kind, number = marker.group(1), int(marker.group(2))
        end = markers[i + 1].start() if i + 1 < len(markers) else len(body)
        chunk = body[marker.end():end].strip()
        if number not in merged:
            merged[number] = ["", ""]
            order.append(number)
        merged[number][0 if kind == "Step" else 1] += (
            (" " if merged[number][0 if kind == "Step" else 1] else "") + chunk
        )
    texts: list[str] = []
    for number in order:
        step_text, action_text = merged[number]
        combined = " ".join(part for part in (step_text, action_text) if part).strip()
        if combined:
            texts.append(combined)
    if not texts:
        raise GenerationParseError("no non-empty steps found")
    return ReasoningChain.from_texts(texts, final_answer)


def build_generation_request(task: GenerationTask) -> ChatRequest:
    parts: list = [TextPart(task.question)]
    if task.choices:
        parts.append(TextPart("Choices:\n" + "\n".join(task.choices)))
    parts.append(ImagePart(task.image))
    return ChatRequest(
        system=CHAIN_GENERATION_SYSTEM_PROMPT,
        messages=(ChatMessage(role="user", parts=tuple(parts)),),
        max_tokens=GENERATION_MAX_TOKENS,
        temperature=GENERATION_TEMPERATURE,
    )


def generate_chain(
    gateway: ModelGateway,
    task: GenerationTask,
    scope: Optional[CallLedger] = None,
) -> ReasoningChain:
    """Ask the target model for a candidate chain and parse its layout.

    Raises :class:`GenerationParseError` when the reply cannot be parsed;
    the sample then simply stays Pending.
    """
    request = build_generation_request(task)
    try:
        response = gateway.complete(
            task.target_endpoint, request, GENERATION, scope=scope
        )
    except GatewayError as exc:
        raise GenerationParseError(f"generation call failed: {exc}") from exc
    return parse_generated_chain(response.text)


class _SampleRecord:
    __slots__ = ("stub", "state", "steps", "final_answer", "edit_count")

    def __init__(self, stub: SampleStub):
        self.stub = stub
        self.state = VerificationState.PENDING
        self.steps: list[str] = []
        self.final_answer = ""
        self.edit_count = 0

    def view(self) -> CurationState:
        chain = (
            ReasoningChain.from_texts(self.steps, self.final_answer)
            if self.steps
            else None
        )
        return CurationState(
            stub=self.stub,
            verification_state=self.state,
            chain=chain,
            edit_count=self.edit_count,
        )


class CurationStore:
    """Append-only event store plus the materialized sample states.

    When opened on a directory, stubs and events are persisted as JSONL
    (``samples.jsonl`` / ``events.jsonl``) and appended atomically under the
    store lock; a fresh store opened on the same directory replays to the
    same states.
    """

    def __init__(self, directory: Optional[str | Path] = None):
        self._lock = threading.RLock()
        self._records: dict[str, _SampleRecord] = {}
        self._events: list[VerificationEvent] = []
        self._dir = Path(directory) if directory is not None else None
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._load()

    # -- persistence -------------------------------------------------------

    @property
    def _stub_path(self) -> Path:
        assert self._dir is not None
        return self._dir / "samples.jsonl"

    @property
    def _event_path(self) -> Path:
        assert self._dir is not None
        return self._dir / "events.jsonl"

    def _load(self) -> None:
        if self._stub_path.exists():
            with open(self._stub_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._register_record(_stub_from_dict(json.loads(line)))
        if self._event_path.exists():
            with open(self._event_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        event = VerificationEvent.from_dict(json.loads(line))
                        self._apply_locked(event)

    def _append_line(self, path: Path, data: dict) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(data, ensure_ascii=False) + "\n")

    # -- registration and events -------------------------------------------

    def _register_record(self, stub: SampleStub) -> None:
        if stub.id in self._records:
            raise ValueError(f"sample {stub.id!r} already registered")
        self._records[stub.id] = _SampleRecord(stub)

    def register(self, stub: SampleStub) -> None:
        with self._lock:
            self._register_record(stub)
            if self._dir is not None:
                self._append_line(self._stub_path, _stub_to_dict(stub))

    def apply_event(self, event: VerificationEvent) -> CurationState:
        """Validate, append, and fold one event; returns the new state."""
        with self._lock:
            state = self._apply_locked(event)
            if self._dir is not None:
                self._append_line(self._event_path, event.to_dict())
            return state

    def _apply_locked(self, event: VerificationEvent) -> CurationState:
        record = self._records.get(event.sample_id)
        if record is None:
            raise UnknownSampleError(event.sample_id)
        if record.state in (VerificationState.ACCEPTED, VerificationState.REJECTED):
            raise IllegalEventError(
                "illegal-transition",
                f"sample {event.sample_id!r} is {record.state.value}; "
                "no further events allowed",
            )
        handler = _EVENT_HANDLERS.get(event.kind)
        if handler is None:
            raise IllegalEventError("illegal-transition", f"unknown kind {event.kind!r}")
        handler(record, event)
        if event.kind in EDIT_KINDS:
            record.edit_count += 1
        self._events.append(event)
        return record.view()

    # -- queries -----------------------------------------------------------

    def state(self, sample_id: str) -> CurationState:
        with self._lock:
            record = self._records.get(sample_id)
            if record is None:
                raise UnknownSampleError(sample_id)
            return record.view()

    def events_for(self, sample_id: str) -> tuple[VerificationEvent, ...]:
        with self._lock:
            if sample_id not in self._records:
                raise UnknownSampleError(sample_id)
            return tuple(e for e in self._events if e.sample_id == sample_id)

    def all_events(self) -> tuple[VerificationEvent, ...]:
        with self._lock:
            return tuple(self._events)

    def sample_ids(self) -> tuple[str, ...]:
        with self._lock:
            return tuple(self._records)

    def states_snapshot(self) -> dict[str, CurationState]:
        with self._lock:
            return {sid: record.view() for sid, record in self._records.items()}

    def in_state(self, state: VerificationState) -> list[CurationState]:
        with self._lock:
            return [
                record.view()
                for record in self._records.values()
                if record.state is state
            ]

    def accepted_samples(self) -> list[BenchmarkSample]:
        return [view.sample() for view in self.in_state(VerificationState.ACCEPTED)]

    def stats(self) -> CurationStats:
        with self._lock:
            total = len(self._records)
            accepted = [
                r for r in self._records.values()
                if r.state is VerificationState.ACCEPTED
            ]
            rejected = [
                r for r in self._records.values()
                if r.state is VerificationState.REJECTED
            ]
            decided = accepted + rejected
            edited = [r for r in decided if r.edit_count > 0]
            fraction = len(edited) / len(decided) if decided else 0.0
            total_steps = sum(len(r.steps) for r in accepted)
            return CurationStats(
                total=total,
                accepted=len(accepted),
                rejected=len(rejected),
                fraction_with_any_edit=fraction,
                total_steps=total_steps,
            )

    @classmethod
    def replay(
        cls,
        stubs: Iterable[SampleStub],
        events: Iterable[VerificationEvent],
    ) -> "CurationStore":
        """Rebuild a store from scratch; used to audit determinism."""
        store = cls()
        for stub in stubs:
            store.register(stub)
        for event in events:
            store.apply_event(event)
        return store


def _require_in_review(record: _SampleRecord, event: VerificationEvent) -> None:
    if record.state is not VerificationState.IN_REVIEW:
        raise IllegalEventError(
            "illegal-transition",
            f"{event.kind} requires InReview, sample is {record.state.value}",
        )


def _payload_str(event: VerificationEvent, key: str) -> str:
    value = event.payload.get(key)
    if not isinstance(value, str) or not value.strip():
        raise IllegalEventError(
            "bad-payload", f"{event.kind} needs non-empty {key!r}"
        )
    return value.strip()


def _payload_int(event: VerificationEvent, key: str) -> int:
    value = event.payload.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise IllegalEventError("bad-payload", f"{event.kind} needs integer {key!r}")
    return value


def _on_generated(record: _SampleRecord, event: VerificationEvent) -> None:
    if record.state is not VerificationState.PENDING:
        raise IllegalEventError(
            "illegal-transition",
            f"Generated requires Pending, sample is {record.state.value}",
        )
    steps = event.payload.get("steps")
    if not isinstance(steps, list) or not steps:
        raise IllegalEventError("bad-payload", "Generated needs a steps list")
    final = _payload_str(event, "final_answer")
    texts = [str(s).strip() for s in steps]
    if any(not t for t in texts):
        raise IllegalEventError("bad-payload", "Generated steps must be non-empty")
    record.steps = texts
    record.final_answer = final
    record.state = VerificationState.IN_REVIEW


def _on_edited_step(record: _SampleRecord, event: VerificationEvent) -> None:
    _require_in_review(record, event)
    index = _payload_int(event, "index")
    if not 1 <= index <= len(record.steps):
        raise IllegalEventError(
            "bad-step-index", f"no step {index} to edit (have {len(record.steps)})"
        )
    record.steps[index - 1] = _payload_str(event, "text")


def _on_step_added(record: _SampleRecord, event: VerificationEvent) -> None:
    _require_in_review(record, event)
    position = _payload_int(event, "position")
    if not 1 <= position <= len(record.steps) + 1:
        raise IllegalEventError(
            "bad-step-index",
            f"position {position} outside 1..{len(record.steps) + 1}",
        )
    record.steps.insert(position - 1, _payload_str(event, "text"))


def _on_step_removed(record: _SampleRecord, event: VerificationEvent) -> None:
    _require_in_review(record, event)
    index = _payload_int(event, "index")
    if not 1 <= index <= len(record.steps):
        raise IllegalEventError(
            "bad-step-index", f"no step {index} to remove (have {len(record.steps)})"
        )
    if len(record.steps) == 1:
        raise IllegalEventError(
            "bad-step-index", "cannot remove the only remaining step"
        )
    del record.steps[index - 1]


def _on_final_answer_edited(record: _SampleRecord, event: VerificationEvent) -> None:
    _require_in_review(record, event)
    record.final_answer = _payload_str(event, "text")


def _on_accepted(record: _SampleRecord, event: VerificationEvent) -> None:
    _require_in_review(record, event)
    candidate = BenchmarkSample(
        id=record.stub.id,
        category=record.stub.category,
        question=record.stub.question,
        choices=record.stub.choices,
        image=record.stub.image,
        ground_truth=ReasoningChain.from_texts(record.steps, record.final_answer),
        min_step_exempt=record.stub.min_step_exempt,
        verification_state=VerificationState.ACCEPTED,
        provenance=record.stub.provenance,
    )
    violations = validate_sample(candidate)
    if violations:
        raise IllegalEventError(
            violations[0].code,
            "cannot accept: " + "; ".join(v.message for v in violations),
        )
    record.state = VerificationState.ACCEPTED


def _on_rejected(record: _SampleRecord, event: VerificationEvent) -> None:
    _require_in_review(record, event)
    record.state = VerificationState.REJECTED


_EVENT_HANDLERS = {
    EVENT_GENERATED: _on_generated,
    EVENT_EDITED_STEP: _on_edited_step,
    EVENT_STEP_ADDED: _on_step_added,
    EVENT_STEP_REMOVED: _on_step_removed,
    EVENT_FINAL_ANSWER_EDITED: _on_final_answer_edited,
    EVENT_ACCEPTED: _on_accepted,
    EVENT_REJECTED: _on_rejected,
}


def _stub_to_dict(stub: SampleStub) -> dict[str, Any]:
    return {
        "id": stub.id,
        "category": stub.category.value,
        "question": stub.question,
        "choices": list(stub.choices) if stub.choices is not None else None,
        "image": {
            "kind": stub.image.kind.value,
            "value": stub.image.value,
            "media_type": stub.image.media_type,
        },
        "provenance": stub.provenance,
        "min_step_exempt": stub.min_step_exempt,
    }


def _stub_from_dict(data: Mapping[str, Any]) -> SampleStub:
    from .core import ImageKind

    image = data["image"]
    choices = data.get("choices")
    return SampleStub(
        id=data["id"],
        category=Category.from_wire(data["category"]),
        question=data["question"],
        choices=tuple(choices) if choices is not None else None,
        image=ImageRef(
            kind=ImageKind(image["kind"]),
            value=image["value"],
            media_type=image.get("media_type", ""),
        ),
        provenance=data.get("provenance", ""),
        min_step_exempt=bool(data.get("min_step_exempt", False)),
    )


class LeaseManager:
    """Per-sample review leases with TTL; one active reviewer per sample."""

    def __init__(self, ttl: float = DEFAULT_LEASE_TTL, clock: Optional[Clock] = None):
        self._ttl = ttl
        self._clock: Clock = clock if clock is not None else SystemClock()
        self._leases: dict[str, ReviewLease] = {}
        self._lock = threading.Lock()

    def acquire(self, sample_id: str, reviewer: str) -> ReviewLease:
        """Grant or renew a lease; raises :class:`LeaseConflict` when a
        different reviewer holds an unexpired one."""
        if not reviewer.strip():
            raise ValueError("reviewer must be non-empty")
        with self._lock:
            now = self._clock.monotonic()
            current = self._leases.get(sample_id)
            if current and current.reviewer != reviewer and current.expires_at > now:
                raise LeaseConflict(
                    f"sample {sample_id!r} is leased by {current.reviewer!r}"
                )
            lease = ReviewLease(
                sample_id=sample_id, reviewer=reviewer, expires_at=now + self._ttl
            )
            self._leases[sample_id] = lease
            return lease

    def holder(self, sample_id: str) -> Optional[str]:
        with self._lock:
            lease = self._leases.get(sample_id)
            if lease is None or lease.expires_at <= self._clock.monotonic():
                return None
            return lease.reviewer

    def is_held_by(self, sample_id: str, reviewer: str) -> bool:
        return self.holder(sample_id) == reviewer

    def release(self, sample_id: str) -> None:
        with self._lock:
            self._leases.pop(sample_id, None)


def make_event(
    sample_id: str,
    kind: str,
    payload: Optional[Mapping[str, Any]] = None,
    actor: str = "",
    ts: Optional[float] = None,
) -> VerificationEvent:
    return VerificationEvent(
        sample_id=sample_id,
        kind=kind,
        payload=payload or {},
        actor=actor,
        ts=ts if ts is not None else time.time(),
    )
