"""Core domain types shared by every part of the toolkit.

Everything here is an immutable value object: samples, reasoning chains,
scorecards, and the closed category/metric enumerations. Constructors
enforce local structural invariants; dataset-level policy checks (the
minimum-step rule, image payload consistency) live in
:func:`validate_sample`, which reports violations as data instead of
raising.
"""

from __future__ import annotations

import base64
import binascii
import enum
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

OVERALL_TOLERANCE = 1e-9

MIN_REASONING_STEPS = 3


class Category(enum.Enum):
    """The eight task categories. Closed set; the value is the wire name."""

    VISUAL_REASONING = "VisualReasoning"
    MATH_LOGIC_REASONING = "MathLogicReasoning"
    SOCIAL_CULTURAL_CONTEXT = "SocialCulturalContext"
    MEDICAL_IMAGING = "MedicalImaging"
    CHARTS_DIAGRAM_UNDERSTANDING = "ChartsDiagramUnderstanding"
    OCR_DOCUMENT_UNDERSTANDING = "OcrDocumentUnderstanding"
    COMPLEX_VISUAL_PERCEPTION = "ComplexVisualPerception"
    SCIENTIFIC_REASONING = "ScientificReasoning"

    @classmethod
    def from_wire(cls, value: str) -> "Category":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown category: {value!r}") from None


class MetricName(enum.Enum):
    """The ten scorecard attributes, in their fixed serialization order.

    The value is the exact key the judge model emits.
    """

    FAITHFULNESS_STEP = "Faithfulness-Step"
    FAITHFULNESS_TOKEN = "Faithfulness-Token"
    INFORMATIVENESS_STEP = "Informativeness-Step"
    REPETITION_TOKEN = "Repetition-Token"
    HALLUCINATION = "Hallucination"
    REDUNDANCY = "Redundancy"
    SEMANTIC_COVERAGE_STEP = "Semantic Coverage-Step"
    REASONING_ALIGNMENT = "Reasoning Alignment"
    COMMONSENSE = "Commonsense"
    MISSING_STEP = "Missing Step"

    @classmethod
    def ordered(cls) -> tuple["MetricName", ...]:
        return tuple(cls)

    @classmethod
    def from_wire(cls, value: str) -> "MetricName":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown metric: {value!r}") from None


class VerificationState(enum.Enum):
    PENDING = "Pending"
    IN_REVIEW = "InReview"
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"


class ImageKind(enum.Enum):
    FILE_PATH = "FilePath"
    URL = "Url"
    INLINE_BASE64 = "InlineBase64"


@dataclass(frozen=True, slots=True)
class ImageRef:
    """Opaque reference to the question image; never fetched or resized here."""

    kind: ImageKind
    value: str
    media_type: str = ""

    def __post_init__(self) -> None:
        if not self.value:
            raise ValueError("image value must be non-empty")


@dataclass(frozen=True, slots=True)
class ReasoningStep:
    """One step of a reasoning chain. Index is 1-based and contiguous."""

    index: int
    text: str

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"step index must be >= 1, got {self.index}")
        if not self.text.strip():
            raise ValueError(f"step {self.index} text must be non-empty")
        object.__setattr__(self, "text", self.text.strip())


@dataclass(frozen=True, slots=True)
class ReasoningChain:
    """Ordered reasoning steps plus the final answer they lead to."""

    steps: tuple[ReasoningStep, ...]
    final_answer: str

    def __post_init__(self) -> None:
        steps = tuple(self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ValueError("a reasoning chain needs at least one step")
        for position, step in enumerate(steps, start=1):
            if step.index != position:
                raise ValueError(
                    f"step indices must be contiguous from 1; "
                    f"found index {step.index} at position {position}"
                )
        if not self.final_answer.strip():
            raise ValueError("final answer must be non-empty")

    @classmethod
    def from_texts(cls, texts: Sequence[str], final_answer: str) -> "ReasoningChain":
        steps = tuple(ReasoningStep(i, t) for i, t in enumerate(texts, start=1))
        return cls(steps=steps, final_answer=final_answer)

    def step_texts(self) -> tuple[str, ...]:
        return tuple(step.text for step in self.steps)

    def as_text(self) -> str:
        """Deterministic plain-text rendering used in judge prompts."""
        lines = [f"Step {step.index}: {step.text}" for step in self.steps]
        lines.append(f"Final Answer: {self.final_answer}")
        return "\n".join(lines)


@dataclass(frozen=True, slots=True)
class StageFields:
    """Optional curated per-stage texts carried by curriculum-style sources.

    Any stage left as None is synthesized from the ground-truth chain at
    export time.
    """

    summary: Optional[str] = None
    caption: Optional[str] = None
    reasoning: Optional[str] = None
    final_answer: Optional[str] = None

    def is_empty(self) -> bool:
        return all(
            v is None
            for v in (self.summary, self.caption, self.reasoning, self.final_answer)
        )


@dataclass(frozen=True, slots=True)
class BenchmarkSample:
    """One benchmark question with its verified ground-truth chain."""

    id: str
    category: Category
    question: str
    image: ImageRef
    ground_truth: ReasoningChain
    choices: Optional[tuple[str, ...]] = None
    min_step_exempt: bool = False
    verification_state: VerificationState = VerificationState.PENDING
    provenance: str = ""
    stages: Optional[StageFields] = None

    def __post_init__(self) -> None:
        if self.choices is not None:
            object.__setattr__(self, "choices", tuple(self.choices))


@dataclass(frozen=True, slots=True)
class Violation:
    """One violated sample invariant; violations are data, not failures."""

    code: str
    message: str


def validate_sample(sample: BenchmarkSample) -> list[Violation]:
    """Check every sample-level invariant and return all violations.

    Pure: equal inputs produce equal outputs, and the sample is never
    mutated. An empty list means the sample is valid.
    """
    violations: list[Violation] = []
    if not sample.id.strip():
        violations.append(Violation("empty-id", "sample id must be non-empty"))
    if not sample.question.strip():
        violations.append(Violation("empty-question", "question must be non-empty"))
    if sample.choices is not None:
        if not sample.choices:
            violations.append(
                Violation("empty-choices", "choices, when present, must be non-empty")
            )
        elif any(not choice.strip() for choice in sample.choices):
            violations.append(
                Violation("blank-choice", "every choice must be non-empty")
            )
    if not sample.min_step_exempt and len(sample.ground_truth.steps) < MIN_REASONING_STEPS:
        violations.append(
            Violation(
                "min-steps",
                f"non-exempt samples need at least {MIN_REASONING_STEPS} reasoning "
                f"steps, got {len(sample.ground_truth.steps)}",
            )
        )
    if sample.image.kind is ImageKind.INLINE_BASE64:
        if not sample.image.media_type:
            violations.append(
                Violation(
                    "image-media-type",
                    "inline images must declare a media type",
                )
            )
        try:
            base64.b64decode(sample.image.value, validate=True)
        except (binascii.Error, ValueError):
            violations.append(
                Violation("image-base64", "inline image value is not valid base64")
            )
    return violations


class ScorecardError(ValueError):
    """Raised for structurally invalid scorecard inputs.

    ``kind`` is one of: missing_key, extra_key, non_numeric, out_of_range,
    unparseable. ``key`` names the offending entry when there is one.
    """

    def __init__(self, kind: str, message: str, key: str | None = None):
        super().__init__(message)
        self.kind = kind
        self.key = key


def _require_score(name: str, value: Any) -> float:
    # bool is an int subclass; a judge emitting true/false is not a score.
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScorecardError(
            "non_numeric", f"score for {name!r} is not numeric: {value!r}", key=name
        )
    score = float(value)
    if math.isnan(score) or not 1.0 <= score <= 10.0:
        raise ScorecardError(
            "out_of_range", f"score for {name!r} outside [1, 10]: {value!r}", key=name
        )
    return score


def recompute_overall(scores: Mapping[MetricName, float]) -> float:
    """Arithmetic mean of the ten attribute scores.

    Requires exactly the ten metrics, each within [1, 10]. The judge's
    self-reported overall never feeds this computation.
    """
    for metric in MetricName.ordered():
        if metric not in scores:
            raise ScorecardError(
                "missing_key", f"missing metric {metric.value!r}", key=metric.value
            )
    extras = [k for k in scores if not isinstance(k, MetricName)]
    if extras or len(scores) != len(MetricName.ordered()):
        unexpected = extras or [
            k for k in scores if k not in set(MetricName.ordered())
        ]
        raise ScorecardError(
            "extra_key", f"unexpected scorecard entries: {unexpected!r}"
        )
    values = [_require_score(m.value, scores[m]) for m in MetricName.ordered()]
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class JudgeScorecard:
    """Ten attribute scores plus the locally recomputed overall.

    ``judge_reported_overall`` keeps whatever the judge claimed, for audit
    only; ``overall`` is always the arithmetic mean of the ten attributes.
    """

    scores: Mapping[MetricName, float]
    overall: float
    judge_reported_overall: Optional[float] = None

    def __post_init__(self) -> None:
        expected = recompute_overall(self.scores)
        if abs(expected - self.overall) > OVERALL_TOLERANCE:
            raise ScorecardError(
                "out_of_range",
                f"overall {self.overall} does not match recomputed mean {expected}",
            )
        ordered = {m: float(self.scores[m]) for m in MetricName.ordered()}
        object.__setattr__(self, "scores", ordered)

    @classmethod
    def from_scores(
        cls,
        scores: Mapping[MetricName, float],
        judge_reported_overall: Optional[float] = None,
    ) -> "JudgeScorecard":
        return cls(
            scores=scores,
            overall=recompute_overall(scores),
            judge_reported_overall=judge_reported_overall,
        )

    def score(self, metric: MetricName) -> float:
        return self.scores[metric]

    def to_dict(self) -> dict[str, float]:
        """Serialize with the judge's key names, in canonical metric order."""
        out: dict[str, float] = {m.value: self.scores[m] for m in MetricName.ordered()}
        if self.judge_reported_overall is not None:
            out["Overall Score"] = self.judge_reported_overall
        return out


def sample_to_dict(sample: BenchmarkSample) -> dict[str, Any]:
    """Canonical JSON encoding of one sample (one JSONL line when dumped)."""
    out: dict[str, Any] = {
        "id": sample.id,
        "category": sample.category.value,
        "question": sample.question,
        "choices": list(sample.choices) if sample.choices is not None else None,
        "image": {
            "kind": sample.image.kind.value,
            "value": sample.image.value,
            "media_type": sample.image.media_type,
        },
        "ground_truth": {
            "steps": list(sample.ground_truth.step_texts()),
            "final_answer": sample.ground_truth.final_answer,
        },
        "min_step_exempt": sample.min_step_exempt,
        "verification_state": sample.verification_state.value,
        "provenance": sample.provenance,
    }
    if sample.stages is not None and not sample.stages.is_empty():
        stages: dict[str, str] = {}
        for name in ("summary", "caption", "reasoning", "final_answer"):
            value = getattr(sample.stages, name)
            if value is not None:
                stages[name] = value
        out["stages"] = stages
    return out


def sample_from_dict(data: Mapping[str, Any]) -> BenchmarkSample:
    """Inverse of :func:`sample_to_dict`; raises ValueError on bad shape."""
    try:
        image_data = data["image"]
        image = ImageRef(
            kind=ImageKind(image_data["kind"]),
            value=image_data["value"],
            media_type=image_data.get("media_type", ""),
        )
        chain_data = data["ground_truth"]
        chain = ReasoningChain.from_texts(
            chain_data["steps"], chain_data["final_answer"]
        )
        stages_data = data.get("stages")
        stages = None
        if stages_data:
            stages = StageFields(
                summary=stages_data.get("summary"),
                caption=stages_data.get("caption"),
                reasoning=stages_data.get("reasoning"),
                final_answer=stages_data.get("final_answer"),
            )
        choices = data.get("choices")
        return BenchmarkSample(
            id=data["id"],
            category=Category.from_wire(data["category"]),
            question=data["question"],
            choices=tuple(choices) if choices is not None else None,
            image=image,
            ground_truth=chain,
            min_step_exempt=bool(data.get("min_step_exempt", False)),
            verification_state=VerificationState(
                data.get("verification_state", "Pending")
            ),
            provenance=data.get("provenance", ""),
            stages=stages,
        )
    except KeyError as exc:
        raise ValueError(f"sample record missing field {exc.args[0]!r}") from None
