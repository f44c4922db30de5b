"""Reference-based reasoning-quality scoring through a judge model.

Builds the fixed judge prompts (shipped verbatim as package assets so their
hashes can be pinned), enforces the strict scorecard output contract, and
reduces the judge's final-answer comparison to a binary verdict. Scores are
rejected, never clamped: a judge that wanders outside its own rubric produces
an auditable per-sample failure instead of silently biased aggregates.
"""

from __future__ import annotations

import ast
import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources
from typing import Optional

from .core import (
    JudgeScorecard,
    MetricName,
    ReasoningChain,
    ScorecardError,
)
from .gateway import (
    JUDGE,
    CallLedger,
    ChatMessage,
    ChatRequest,
    EndpointConfig,
    GatewayError,
    ModelGateway,
    SchemaRef,
)

STEP_EVAL_MAX_TOKENS = 500
STEP_EVAL_TEMPERATURE = 0.0
FINAL_ANSWER_MAX_TOKENS = 10
FINAL_ANSWER_TEMPERATURE = 0.0

_FENCE_RE = re.compile(r"^```[a-zA-Z0-9_-]*\s*\n?|\n?```\s*$")


def _load_prompt(name: str) -> str:
    return (
        resources.files("stepeval.prompts").joinpath(name).read_text(encoding="utf-8")
    )


CHAIN_GENERATION_SYSTEM_PROMPT = _load_prompt("chain_generation_system.txt")
STEP_JUDGE_SYSTEM_PROMPT = _load_prompt("step_judge_system.txt")
FINAL_ANSWER_SYSTEM_PROMPT = _load_prompt("final_answer_system.txt")
FINAL_ANSWER_USER_TEMPLATE = _load_prompt("final_answer_user.txt")
CANDIDATE_RANKING_SYSTEM_PROMPT = _load_prompt("candidate_ranking_system.txt")
PAIRWISE_COMPARISON_SYSTEM_PROMPT = _load_prompt("pairwise_comparison_system.txt")

EVALUATION_SCORES_SCHEMA: dict = json.loads(
    _load_prompt("evaluation_scores_schema.json")
)

EVALUATION_SCORES_SCHEMA_REF = SchemaRef(
    name="EvaluationScores", payload=EVALUATION_SCORES_SCHEMA
)

OVERALL_KEY = "Overall Score"


def prompt_sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def prompt_hashes() -> dict[str, str]:
    """Digest of every embedded prompt asset, for manifests and drift checks."""
    return {
        "chain_generation_system": prompt_sha256(CHAIN_GENERATION_SYSTEM_PROMPT),
        "step_judge_system": prompt_sha256(STEP_JUDGE_SYSTEM_PROMPT),
        "final_answer_system": prompt_sha256(FINAL_ANSWER_SYSTEM_PROMPT),
        "final_answer_user": prompt_sha256(FINAL_ANSWER_USER_TEMPLATE),
        "candidate_ranking_system": prompt_sha256(CANDIDATE_RANKING_SYSTEM_PROMPT),
        "pairwise_comparison_system": prompt_sha256(PAIRWISE_COMPARISON_SYSTEM_PROMPT),
    }


class JudgeError(Exception):
    """A judge call failed for one sample; failures are isolated per sample."""

    def __init__(self, message: str, sample_id: Optional[str] = None):
        self.sample_id = sample_id
        if sample_id:
            message = f"[{sample_id}] {message}"
        super().__init__(message)


class NonNumericVerdict(JudgeError):
    """The final-answer judge replied with anything other than 0 or 1."""


@dataclass(frozen=True, slots=True)
class StepEvalInput:
    question: str
    ground_truth: ReasoningChain
    model_response: str

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("question must be non-empty")
        if not self.model_response.strip():
            raise ValueError("model response must be non-empty")


@dataclass(frozen=True, slots=True)
class FinalAnswerVerdict:
    score: int
    raw_judge_text: str

    def __post_init__(self) -> None:
        if self.score not in (0, 1):
            raise ValueError("verdict score must be 0 or 1")


def build_step_eval_messages(input: StepEvalInput) -> ChatRequest:
    """Compose the scorecard request: fixed system prompt, strict schema,
    deterministic decoding, and the question / ground truth / response
    laid out on consecutive lines."""
    user_text = (
        f"{input.question}\n"
        f"Ground Truth : {input.ground_truth.as_text()}\n"
        f"LLM Response : {input.model_response}"
    )
    return ChatRequest(
        system=STEP_JUDGE_SYSTEM_PROMPT,
        messages=(ChatMessage.text("user", user_text),),
        max_tokens=STEP_EVAL_MAX_TOKENS,
        temperature=STEP_EVAL_TEMPERATURE,
        response_schema=EVALUATION_SCORES_SCHEMA_REF,
    )


def strip_code_fences(text: str) -> str:
    """Remove a single wrapping ``` / ```python fence, if present."""
    stripped = text.strip()
    if stripped.startswith("```"):
        stripped = _FENCE_RE.sub("", stripped).strip()
    return stripped


def parse_scorecard(judge_text: str) -> JudgeScorecard:
    """Parse the judge's scorecard object into a validated value.

    Accepts strict JSON and the single-quoted dict literal the judge prompt
    itself demonstrates. Exactly the ten metric keys are required; the
    "Overall Score" entry is kept for audit but the overall is always
    recomputed locally. Every deviation raises :class:`ScorecardError` with
    a distinct ``kind``.
    """
    cleaned = strip_code_fences(judge_text)
    if not cleaned:
        raise ScorecardError("unparseable", "empty judge reply")
    data = None
    try:
        data = json.loads(cleaned)
    except json.JSONDecodeError:
        try:
            data = ast.literal_eval(cleaned)
        except (ValueError, SyntaxError):
            raise ScorecardError(
                "unparseable", f"judge reply is not a score object: {cleaned[:120]!r}"
            ) from None
    if not isinstance(data, dict):
        raise ScorecardError(
            "unparseable", f"judge reply is not a score object: {cleaned[:120]!r}"
        )

    known = {m.value: m for m in MetricName.ordered()}
    extra = [k for k in data if k not in known and k != OVERALL_KEY]
    if extra:
        raise ScorecardError(
            "extra_key", f"unexpected key {extra[0]!r} in scorecard", key=extra[0]
        )
    scores: dict[MetricName, float] = {}
    for wire_key, metric in known.items():
        if wire_key not in data:
            raise ScorecardError(
                "missing_key", f"missing key {wire_key!r}", key=wire_key
            )
        scores[metric] = data[wire_key]

    judge_overall = None
    if OVERALL_KEY in data:
        value = data[OVERALL_KEY]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ScorecardError(
                "non_numeric",
                f"score for {OVERALL_KEY!r} is not numeric: {value!r}",
                key=OVERALL_KEY,
            )
        judge_overall = float(value)
    return JudgeScorecard.from_scores(scores, judge_reported_overall=judge_overall)


def serialize_scorecard(scorecard: JudgeScorecard) -> str:
    """Canonical JSON text of a scorecard; parse_scorecard inverts this."""
    return json.dumps(scorecard.to_dict(), ensure_ascii=False)


def score_steps(
    gateway: ModelGateway,
    endpoint: EndpointConfig,
    input: StepEvalInput,
    sample_id: Optional[str] = None,
    scope: Optional[CallLedger] = None,
) -> JudgeScorecard:
    """One judge call scoring a model response against its reference chain."""
    request = build_step_eval_messages(input)
    try:
        response = gateway.complete(endpoint, request, JUDGE, scope=scope)
    except GatewayError as exc:
        raise JudgeError(f"step scoring call failed: {exc}", sample_id) from exc
    try:
        return parse_scorecard(response.text)
    except ScorecardError as exc:
        raise JudgeError(f"scorecard rejected ({exc.kind}): {exc}", sample_id) from exc


def build_final_answer_request(
    question: str, ground_truth: str, prediction: str
) -> ChatRequest:
    user_text = FINAL_ANSWER_USER_TEMPLATE.format(
        question=question, ground_truth=ground_truth, prediction=prediction
    )
    return ChatRequest(
        system=FINAL_ANSWER_SYSTEM_PROMPT,
        messages=(ChatMessage.text("user", user_text),),
        max_tokens=FINAL_ANSWER_MAX_TOKENS,
        temperature=FINAL_ANSWER_TEMPERATURE,
    )


def judge_final_answer(
    gateway: ModelGateway,
    endpoint: EndpointConfig,
    question: str,
    ground_truth: str,
    prediction: str,
    sample_id: Optional[str] = None,
    scope: Optional[CallLedger] = None,
) -> FinalAnswerVerdict:
    """Binary semantic match of a predicted final answer, decided by the judge.

    Only a reply that trims to exactly "0" or "1" is accepted.
    """
    request = build_final_answer_request(question, ground_truth, prediction)
    try:
        response = gateway.complete(endpoint, request, JUDGE, scope=scope)
    except GatewayError as exc:
        raise JudgeError(f"final-answer call failed: {exc}", sample_id) from exc
    reply = response.text.strip()
    if reply == "1":
        return FinalAnswerVerdict(score=1, raw_judge_text=response.text)
    if reply == "0":
        return FinalAnswerVerdict(score=0, raw_judge_text=response.text)
    raise NonNumericVerdict(
        f"final-answer judge must reply 0 or 1, got {reply[:40]!r}", sample_id
    )
