"""HTTP interface the annotator UI drives; a thin layer over curation.

The API adds no semantics of its own: request bodies mirror the event-log
encoding exactly, event application delegates to the store, and a UI posting
through here produces the same store as code calling the store directly.
Reviewers are identified by the ``X-Reviewer`` header (deployment-grade
authentication is out of scope); state-changing calls require a live lease.
"""

from __future__ import annotations

import time
from typing import Any, Optional

from fastapi import FastAPI, Header, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from .core import VerificationState
from .curation import (
    CurationState,
    CurationStore,
    IllegalEventError,
    LeaseConflict,
    LeaseManager,
    UnknownSampleError,
    VerificationEvent,
)

QUEUE_STATES = {
    "Pending": VerificationState.PENDING,
    "InReview": VerificationState.IN_REVIEW,
}


class LeaseBody(BaseModel):
    reviewer: str = Field(min_length=1)


class EventBody(BaseModel):
    kind: str
    payload: dict[str, Any] = Field(default_factory=dict)
    ts: Optional[float] = None


def _chain_payload(view: CurationState) -> Optional[dict[str, Any]]:
    if view.chain is None:
        return None
    return {
        "steps": list(view.chain.step_texts()),
        "final_answer": view.chain.final_answer,
    }


def _summary(view: CurationState, leased_by: Optional[str]) -> dict[str, Any]:
    return {
        "id": view.stub.id,
        "category": view.stub.category.value,
        "question": view.stub.question,
        "state": view.verification_state.value,
        "step_count": len(view.chain.steps) if view.chain else 0,
        "chain": _chain_payload(view),
        "leased_by": leased_by,
    }


def _full_view(
    view: CurationState,
    events: tuple[VerificationEvent, ...],
    leased_by: Optional[str],
) -> dict[str, Any]:
    return {
        "id": view.stub.id,
        "category": view.stub.category.value,
        "question": view.stub.question,
        "choices": list(view.stub.choices) if view.stub.choices else None,
        "image": {
            "kind": view.stub.image.kind.value,
            "value": view.stub.image.value,
            "media_type": view.stub.image.media_type,
        },
        "provenance": view.stub.provenance,
        "min_step_exempt": view.stub.min_step_exempt,
        "state": view.verification_state.value,
        "chain": _chain_payload(view),
        "events": [e.to_dict() for e in events],
        "leased_by": leased_by,
    }


def create_app(
    store: CurationStore,
    leases: Optional[LeaseManager] = None,
    cors_origins: tuple[str, ...] = ("*",),
) -> FastAPI:
    leases = leases if leases is not None else LeaseManager()
    app = FastAPI(title="review-api")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=list(cors_origins),
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.get("/queue")
    def queue(
        state: str = Query("Pending"), limit: int = Query(50, ge=1)
    ) -> list[dict[str, Any]]:
        wanted = QUEUE_STATES.get(state)
        if wanted is None:
            raise HTTPException(
                status_code=400,
                detail=f"state must be one of {sorted(QUEUE_STATES)}, got {state!r}",
            )
        out = []
        for view in store.in_state(wanted):
            if leases.holder(view.stub.id) is not None:
                continue
            out.append(_summary(view, None))
            if len(out) >= limit:
                break
        return out

    @app.get("/sample/{sample_id}")
    def sample(sample_id: str) -> dict[str, Any]:
        try:
            view = store.state(sample_id)
            events = store.events_for(sample_id)
        except UnknownSampleError:
            raise HTTPException(404, f"unknown sample {sample_id!r}") from None
        return _full_view(view, events, leases.holder(sample_id))

    @app.post("/sample/{sample_id}/lease")
    def lease(sample_id: str, body: LeaseBody) -> dict[str, Any]:
        try:
            store.state(sample_id)
        except UnknownSampleError:
            raise HTTPException(404, f"unknown sample {sample_id!r}") from None
        try:
            granted = leases.acquire(sample_id, body.reviewer)
        except LeaseConflict as exc:
            raise HTTPException(423, str(exc)) from None
        return {
            "sample_id": granted.sample_id,
            "reviewer": granted.reviewer,
            "expires_at": granted.expires_at,
        }

    @app.post("/sample/{sample_id}/events")
    def post_event(
        sample_id: str,
        body: EventBody,
        x_reviewer: str = Header(default=""),
    ) -> dict[str, Any]:
        try:
            store.state(sample_id)
        except UnknownSampleError:
            raise HTTPException(404, f"unknown sample {sample_id!r}") from None
        if not x_reviewer or not leases.is_held_by(sample_id, x_reviewer):
            raise HTTPException(
                423, f"sample {sample_id!r} is not leased by {x_reviewer!r}"
            )
        try:
            event = VerificationEvent(
                sample_id=sample_id,
                kind=body.kind,
                payload=body.payload,
                actor=x_reviewer,
                ts=body.ts if body.ts is not None else time.time(),
            )
        except ValueError as exc:
            raise HTTPException(409, str(exc)) from None
        try:
            view = store.apply_event(event)
        except IllegalEventError as exc:
            raise HTTPException(
                409, {"reason": exc.reason, "message": str(exc)}
            ) from None
        if view.verification_state in (
            VerificationState.ACCEPTED,
            VerificationState.REJECTED,
        ):
            leases.release(sample_id)
        return _summary(view, leases.holder(sample_id))

    @app.get("/stats")
    def stats() -> dict[str, Any]:
        return store.stats().to_dict()

    return app


def serve(
    store_dir: str,
    port: int,
    lease_ttl: float | None = None,
) -> None:  # pragma: no cover - exercised manually via the CLI
    import uvicorn

    store = CurationStore(store_dir)
    leases = LeaseManager(ttl=lease_ttl) if lease_ttl else LeaseManager()
    uvicorn.run(create_app(store, leases), host="127.0.0.1", port=port)
