"""Inference scaling: parallel best-of-B generation and the stage-level baseline.

``beam_generate`` asks for B complete responses at once and keeps one of
them, so its generation-call count is exactly B no matter how many reasoning
stages the winning response contains. ``stage_level_generate`` is the
baseline it is measured against: four sequential stages, each generating B
candidates conditioned on the winners so far and spending B-1 pairwise judge
comparisons to pick the stage winner, for 4B generation plus 4(B-1) judge
calls per question. The ledger records both shapes exactly; no complexity
class is asserted anywhere, only raw counts.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .core import ImageRef
from .gateway import (
    GENERATION,
    JUDGE,
    CallLedger,
    Candidate,
    ChatMessage,
    ChatRequest,
    EndpointConfig,
    GatewayError,
    ImagePart,
    LedgerSnapshot,
    ModelGateway,
    TextPart,
)
from .judging import (
    CANDIDATE_RANKING_SYSTEM_PROMPT,
    PAIRWISE_COMPARISON_SYSTEM_PROMPT,
)

FINAL_ANSWER_MARKER = "Final Answer:"

SELECTOR_MAX_TOKENS = 10


class InferenceError(Exception):
    """Every candidate for a question failed."""


class StrategyError(Exception):
    """The requested selection strategy cannot run on these candidates."""


class SelectionStrategy(enum.Enum):
    LOG_PROB = "LogProb"
    JUDGE_RANK = "JudgeRank"
    MAJORITY_ANSWER = "MajorityAnswer"


@dataclass(frozen=True, slots=True)
class StagePromptSet:
    """The four fixed stage prompts, in their only legal order."""

    summary: str
    caption: str
    reasoning: str
    conclusion: str

    def as_tuple(self) -> tuple[str, str, str, str]:
        return (self.summary, self.caption, self.reasoning, self.conclusion)

    @staticmethod
    def names() -> tuple[str, str, str, str]:
        return ("summary", "caption", "reasoning", "conclusion")


def pick_default_strategy(
    endpoint: EndpointConfig, multiple_choice: bool
) -> SelectionStrategy:
    """Default selection policy: log probabilities when the endpoint serves
    them, else a majority vote for multiple-choice questions, else one judge
    ranking call."""
    if endpoint.want_logprobs:
        return SelectionStrategy.LOG_PROB
    if multiple_choice:
        return SelectionStrategy.MAJORITY_ANSWER
    return SelectionStrategy.JUDGE_RANK


def default_stage_prompts() -> StagePromptSet:
    return StagePromptSet(
        summary="Please generate a summary of the picture.",
        caption="Please generate a detailed caption for the image.",
        reasoning="Please generate a detailed reasoning to answer the question given the caption.",
        conclusion="Please generate the final answer based on reasoning steps. Do not output anything else.",
    )


@dataclass(frozen=True, slots=True)
class BeamConfig:
    num_beams: int = 1
    strategy: SelectionStrategy = SelectionStrategy.MAJORITY_ANSWER
    stage_prompts: StagePromptSet = field(default_factory=default_stage_prompts)
    max_tokens: int = 1024
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if self.num_beams < 1:
            raise ValueError("num_beams must be >= 1")


@dataclass(frozen=True, slots=True)
class CandidateSet:
    """Outcome of one scaled inference: survivors, the pick, and its cost."""

    candidates: tuple[Candidate, ...]
    selected_index: int
    selection_reason: str
    ledger_delta: LedgerSnapshot
    failed_candidates: int = 0
    stage_winners: Optional[tuple[str, ...]] = None

    def __post_init__(self) -> None:
        if not 0 <= self.selected_index < len(self.candidates):
            raise ValueError(
                f"selected_index {self.selected_index} outside candidate range"
            )

    @property
    def selected_text(self) -> str:
        return self.candidates[self.selected_index].text


@dataclass(frozen=True, slots=True)
class SelectionContext:
    """What a strategy may consult besides the candidates themselves."""

    question: str = ""
    gateway: Optional[ModelGateway] = None
    judge_endpoint: Optional[EndpointConfig] = None
    scope: Optional[CallLedger] = None


def extract_final_answer(text: str) -> str:
    """Final answer of a response: text after the last answer marker, or the
    last non-empty line when no marker is present."""
    marker_at = text.rfind(FINAL_ANSWER_MARKER)
    if marker_at >= 0:
        return text[marker_at + len(FINAL_ANSWER_MARKER):].strip()
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    return lines[-1] if lines else text.strip()


def _select_log_prob(candidates: tuple[Candidate, ...]) -> tuple[int, str]:
    for i, candidate in enumerate(candidates):
        if candidate.logprob_sum is None or not candidate.token_count:
            raise StrategyError(
                f"candidate {i} has no log probabilities; "
                "use JudgeRank or MajorityAnswer instead"
            )
    best_index = 0
    best_value = candidates[0].logprob_sum / candidates[0].token_count
    for i, candidate in enumerate(candidates[1:], start=1):
        value = candidate.logprob_sum / candidate.token_count
        if value > best_value:
            best_index, best_value = i, value
    return best_index, f"log_prob: normalized logprob {best_value:.6f}"


def _select_majority(candidates: tuple[Candidate, ...]) -> tuple[int, str]:
    votes = [extract_final_answer(c.text).casefold() for c in candidates]
    counts = Counter(votes)
    top = max(counts.values())
    winners = {answer for answer, count in counts.items() if count == top}
    for i, vote in enumerate(votes):
        if vote in winners:
            return i, f"majority_answer: {vote!r} with {top}/{len(votes)} votes"
    raise AssertionError("unreachable: some vote always wins")


def _select_judge_rank(
    candidates: tuple[Candidate, ...], context: SelectionContext
) -> tuple[int, str]:
    if context.gateway is None or context.judge_endpoint is None:
        raise StrategyError("JudgeRank needs a judge endpoint")
    blocks = [
        f"Candidate {i + 1}:\n{candidate.text}"
        for i, candidate in enumerate(candidates)
    ]
    user_text = f"Question: {context.question}\n\n" + "\n\n".join(blocks)
    request = ChatRequest(
        system=CANDIDATE_RANKING_SYSTEM_PROMPT,
        messages=(ChatMessage.text("user", user_text),),
        max_tokens=SELECTOR_MAX_TOKENS,
        temperature=0.0,
    )
    try:
        response = context.gateway.complete(
            context.judge_endpoint, request, JUDGE, scope=context.scope
        )
    except GatewayError as exc:
        raise StrategyError(f"ranking judge call failed: {exc}") from exc
    reply = response.text.strip()
    if not reply.isdigit() or not 1 <= int(reply) <= len(candidates):
        raise StrategyError(
            f"ranking judge must name a candidate 1..{len(candidates)}, "
            f"got {reply[:20]!r}"
        )
    index = int(reply) - 1
    return index, f"judge_rank: judge picked candidate {index + 1} of {len(candidates)}"


def select_best(
    candidates: tuple[Candidate, ...],
    strategy: SelectionStrategy,
    context: Optional[SelectionContext] = None,
) -> tuple[int, str]:
    """Pick one candidate. Ties always break to the lowest index."""
    if not candidates:
        raise StrategyError("no candidates to select from")
    if len(candidates) == 1:
        return 0, "single candidate"
    context = context or SelectionContext()
    if strategy is SelectionStrategy.LOG_PROB:
        return _select_log_prob(candidates)
    if strategy is SelectionStrategy.MAJORITY_ANSWER:
        return _select_majority(candidates)
    return _select_judge_rank(candidates, context)


def _question_message(question: str, image: Optional[ImageRef]) -> ChatMessage:
    parts: list = [TextPart(question)]
    if image is not None:
        parts.append(ImagePart(image))
    return ChatMessage(role="user", parts=tuple(parts))


def beam_generate(
    gateway: ModelGateway,
    endpoint: EndpointConfig,
    question: str,
    image: Optional[ImageRef],
    config: BeamConfig,
    judge_endpoint: Optional[EndpointConfig] = None,
    scope: Optional[CallLedger] = None,
) -> CandidateSet:
    """Generate B full responses in parallel and keep the best one.

    Costs exactly B generation calls plus at most one judge call (only the
    JudgeRank strategy spends it), independent of B and of how many stages
    the winning response walks through.
    """
    ledger = CallLedger()
    request = ChatRequest(
        messages=(_question_message(question, image),),
        max_tokens=config.max_tokens,
        temperature=config.temperature,
        n=config.num_beams,
    )
    try:
        response = gateway.complete(endpoint, request, GENERATION, scope=ledger)
    except GatewayError as exc:
        raise InferenceError(
            f"all {config.num_beams} candidates failed: {exc}"
        ) from exc
    candidates = response.candidates
    failed = config.num_beams - len(candidates)
    context = SelectionContext(
        question=question,
        gateway=gateway,
        judge_endpoint=judge_endpoint,
        scope=ledger,
    )
    index, reason = select_best(candidates, config.strategy, context)
    if failed:
        reason = f"{reason}; {failed} candidate(s) failed"
    if scope is not None:
        _merge_scope(scope, ledger, endpoint)
    return CandidateSet(
        candidates=candidates,
        selected_index=index,
        selection_reason=reason,
        ledger_delta=ledger.snapshot(),
        failed_candidates=failed,
    )


def _merge_scope(
    target: CallLedger, source: CallLedger, endpoint: EndpointConfig
) -> None:
    snap = source.snapshot()
    if snap.generation_calls:
        target.record_calls(GENERATION, endpoint, snap.generation_calls, 0.0)
    if snap.judge_calls:
        target.record_calls(JUDGE, endpoint, snap.judge_calls, 0.0)
    for _ in range(snap.retried_calls):
        target.record_retry()


def _pairwise_compare(
    gateway: ModelGateway,
    judge_endpoint: EndpointConfig,
    question: str,
    prefix: str,
    left: str,
    right: str,
    scope: CallLedger,
) -> int:
    """One knockout round; returns 0 if the left candidate survives, else 1."""
    user_text = (
        f"Question: {question}\n\n"
        f"Answer so far:\n{prefix or '(nothing yet)'}\n\n"
        f"Candidate 1:\n{left}\n\n"
        f"Candidate 2:\n{right}"
    )
    request = ChatRequest(
        system=PAIRWISE_COMPARISON_SYSTEM_PROMPT,
        messages=(ChatMessage.text("user", user_text),),
        max_tokens=SELECTOR_MAX_TOKENS,
        temperature=0.0,
    )
    try:
        response = gateway.complete(judge_endpoint, request, JUDGE, scope=scope)
    except GatewayError as exc:
        raise InferenceError(f"pairwise judge call failed: {exc}") from exc
    reply = response.text.strip()
    if reply == "1":
        return 0
    if reply == "2":
        return 1
    raise InferenceError(f"pairwise judge must reply 1 or 2, got {reply[:20]!r}")


def stage_level_generate(
    gateway: ModelGateway,
    endpoint: EndpointConfig,
    question: str,
    image: Optional[ImageRef],
    config: BeamConfig,
    judge_endpoint: Optional[EndpointConfig] = None,
    scope: Optional[CallLedger] = None,
) -> CandidateSet:
    """Stage-level baseline: per stage, B candidates conditioned on the
    winners so far, then a knockout tournament of B-1 pairwise judge calls.

    Total cost is 4B generation calls plus 4(B-1) judge calls.
    """
    if config.num_beams > 1 and judge_endpoint is None:
        raise InferenceError("stage-level selection needs a judge endpoint")
    ledger = CallLedger()
    prompts = config.stage_prompts.as_tuple()
    messages: list[ChatMessage] = [
        _question_message(f"{question} {prompts[0]}", image)
    ]
    winners: list[str] = []
    for stage_index, prompt in enumerate(prompts):
        if stage_index > 0:
            messages.append(ChatMessage.text("user", prompt))
        request = ChatRequest(
            messages=tuple(messages),
            max_tokens=config.max_tokens,
            temperature=config.temperature,
            n=config.num_beams,
        )
        try:
            response = gateway.complete(endpoint, request, GENERATION, scope=ledger)
        except GatewayError as exc:
            raise InferenceError(
                f"stage {stage_index + 1} generation failed: {exc}"
            ) from exc
        texts = [c.text for c in response.candidates]
        prefix = "\n".join(winners)
        champion = texts[0]
        for challenger in texts[1:]:
            survivor = _pairwise_compare(
                gateway, judge_endpoint, question, prefix, champion, challenger, ledger
            )
            if survivor == 1:
                champion = challenger
        winners.append(champion)
        messages.append(ChatMessage.text("assistant", champion))
    composed = "\n".join(winners)
    if scope is not None:
        _merge_scope(scope, ledger, endpoint)
    return CandidateSet(
        candidates=(Candidate(text=composed),),
        selected_index=0,
        selection_reason=(
            f"stage_level: 4 stages x {config.num_beams} beams, "
            f"knockout winners composed"
        ),
        ledger_delta=ledger.snapshot(),
        stage_winners=tuple(winners),
    )
