"""Load, validate, filter, and persist benchmark datasets.

Datasets live on disk as JSONL, one sample object per line, so curation can
append atomically and long evaluations can stream. Loading is strict: the
first malformed line, duplicate id, or invariant violation fails the load
with its line number. Writers take an exclusive advisory lock per file.

This module also exports curriculum-style conversations: one 8-turn
human/assistant exchange per sample, walking summary, caption, reasoning,
and final answer. Samples from sources without curated stage texts degrade
gracefully (the missing turn is synthesized from the ground-truth chain and
the sample is flagged in the export report) rather than failing the export.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from filelock import FileLock, Timeout

from .beam import StagePromptSet, default_stage_prompts
from .core import (
    BenchmarkSample,
    ImageRef,
    MIN_REASONING_STEPS,
    VerificationState,
    sample_from_dict,
    sample_to_dict,
    validate_sample,
)

SFT_TURNS_PER_SAMPLE = 8


class DatasetError(Exception):
    """Malformed dataset file or invalid sample; message carries the line."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, slots=True)
class Dataset:
    samples: tuple[BenchmarkSample, ...]
    name: str = ""
    version: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        seen: set[str] = set()
        for sample in self.samples:
            if sample.id in seen:
                raise ValueError(f"duplicate sample id: {sample.id}")
            seen.add(sample.id)

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self) -> dict[str, BenchmarkSample]:
        return {sample.id: sample for sample in self.samples}

    def total_steps(self) -> int:
        return sum(len(sample.ground_truth.steps) for sample in self.samples)


@dataclass(frozen=True, slots=True)
class SftTurn:
    role: str
    text: str
    image: Optional[ImageRef] = None

    def __post_init__(self) -> None:
        if self.role not in ("human", "assistant"):
            raise ValueError(f"turn role must be human or assistant, got {self.role!r}")


@dataclass(frozen=True, slots=True)
class SftConversation:
    sample_id: str
    turns: tuple[SftTurn, ...]

    def __post_init__(self) -> None:
        turns = tuple(self.turns)
        object.__setattr__(self, "turns", turns)
        if len(turns) != SFT_TURNS_PER_SAMPLE:
            raise ValueError(
                f"a conversation has exactly {SFT_TURNS_PER_SAMPLE} turns, "
                f"got {len(turns)}"
            )
        for i, turn in enumerate(turns):
            expected = "human" if i % 2 == 0 else "assistant"
            if turn.role != expected:
                raise ValueError(
                    f"turn {i + 1} must be {expected}, got {turn.role}"
                )


@dataclass
class ExportReport:
    total: int = 0
    synthesized_captions: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "synthesized_captions": list(self.synthesized_captions),
            "dropped": list(self.dropped),
        }


def load_dataset(path: str | Path) -> Dataset:
    """Read a JSONL dataset; every sample must pass validation.

    Raises :class:`DatasetError` naming the first offending line on parse
    errors, duplicate ids, or invariant violations.
    """
    path = Path(path)
    samples: list[BenchmarkSample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", line_no) from None
            try:
                sample = sample_from_dict(data)
            except ValueError as exc:
                raise DatasetError(str(exc), line_no) from None
            if sample.id in seen:
                raise DatasetError(f"duplicate sample id {sample.id!r}", line_no)
            seen.add(sample.id)
            violations = validate_sample(sample)
            if violations:
                raise DatasetError(
                    f"sample {sample.id!r} invalid: "
                    + "; ".join(v.code for v in violations),
                    line_no,
                )
            samples.append(sample)
    return Dataset(samples=tuple(samples), name=path.stem)


def _exclusive_lock(path: Path) -> FileLock:
    """Advisory write lock; a second concurrent writer is an error, not a wait."""
    lock = FileLock(str(path) + ".lock")
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise DatasetError(f"{path} is locked by another writer") from None
    return lock


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write JSONL atomically under an exclusive per-file advisory lock."""
    path = Path(path)
    lock = _exclusive_lock(path)
    try:
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for sample in dataset.samples:
                fh.write(json.dumps(sample_to_dict(sample), ensure_ascii=False) + "\n")
        tmp.replace(path)
    finally:
        lock.release()


def filter_min_steps(dataset: Dataset) -> tuple[Dataset, list[str]]:
    """Drop samples below the minimum step count unless explicitly exempt.

    Returns the kept dataset (order preserved) and the dropped ids.
    Idempotent: filtering a filtered dataset drops nothing.
    """
    kept: list[BenchmarkSample] = []
    dropped: list[str] = []
    for sample in dataset.samples:
        if sample.min_step_exempt or len(sample.ground_truth.steps) >= MIN_REASONING_STEPS:
            kept.append(sample)
        else:
            dropped.append(sample.id)
    return (
        Dataset(samples=tuple(kept), name=dataset.name, version=dataset.version),
        dropped,
    )


def _stage_texts(sample: BenchmarkSample, report: ExportReport) -> tuple[str, str, str, str]:
    """Assistant texts for the four stages, synthesizing what curation
    did not provide."""
    steps = sample.ground_truth.step_texts()
    stages = sample.stages
    summary = stages.summary if stages and stages.summary else steps[0]
    if stages and stages.caption:
        caption = stages.caption
    else:
        caption = " ".join(steps)
        report.synthesized_captions.append(sample.id)
    reasoning = stages.reasoning if stages and stages.reasoning else " ".join(steps)
    final = (
        stages.final_answer
        if stages and stages.final_answer
        else sample.ground_truth.final_answer
    )
    return summary, caption, reasoning, final


def build_sft_conversation(
    sample: BenchmarkSample,
    stage_prompts: StagePromptSet,
    report: ExportReport,
) -> SftConversation:
    prompts = stage_prompts.as_tuple()
    summary, caption, reasoning, final = _stage_texts(sample, report)
    turns = (
        SftTurn("human", f"{sample.question} {prompts[0]}", image=sample.image),
        SftTurn("assistant", summary),
        SftTurn("human", prompts[1]),
        SftTurn("assistant", caption),
        SftTurn("human", prompts[2]),
        SftTurn("assistant", reasoning),
        SftTurn("human", prompts[3]),
        SftTurn("assistant", final),
    )
    return SftConversation(sample_id=sample.id, turns=turns)


def iter_sft_conversations(
    dataset: Dataset,
    stage_prompts: Optional[StagePromptSet] = None,
    report: Optional[ExportReport] = None,
    skip_unverified: bool = False,
) -> Iterator[SftConversation]:
    """Stream one 8-turn conversation per Accepted sample.

    By default a non-Accepted sample aborts the export; with
    ``skip_unverified`` it is dropped and listed in the report instead.
    """
    prompts = stage_prompts or default_stage_prompts()
    if not prompts.conclusion.endswith("Do not output anything else."):
        raise ValueError(
            'the final stage prompt must end with "Do not output anything else."'
        )
    report = report if report is not None else ExportReport()
    for sample in dataset.samples:
        if sample.verification_state is not VerificationState.ACCEPTED:
            if skip_unverified:
                report.dropped.append(sample.id)
                continue
            raise ValueError(
                f"sample {sample.id!r} is {sample.verification_state.value}; "
                "only Accepted samples can be exported"
            )
        report.total += 1
        yield build_sft_conversation(sample, prompts, report)


def conversation_to_dict(conversation: SftConversation) -> dict:
    turns = []
    for turn in conversation.turns:
        entry: dict = {"role": turn.role, "text": turn.text}
        if turn.image is not None:
            entry["image"] = {
                "kind": turn.image.kind.value,
                "value": turn.image.value,
                "media_type": turn.image.media_type,
            }
        turns.append(entry)
    return {"id": conversation.sample_id, "turns": turns}


def export_sft(
    dataset: Dataset,
    out_path: str | Path,
    stage_prompts: Optional[StagePromptSet] = None,
    report_path: Optional[str | Path] = None,
    skip_unverified: bool = False,
) -> ExportReport:
    """Write the conversation JSONL (and optional report JSON) to disk."""
    out_path = Path(out_path)
    report = ExportReport()
    lock = _exclusive_lock(out_path)
    try:
        tmp = out_path.with_suffix(out_path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for conversation in iter_sft_conversations(
                dataset, stage_prompts, report, skip_unverified=skip_unverified
            ):
                fh.write(
                    json.dumps(conversation_to_dict(conversation), ensure_ascii=False)
                    + "\n"
                )
        tmp.replace(out_path)
    finally:
        lock.release()
    if report_path is not None:
        Path(report_path).write_text(
            json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    return report
