"""Shared builders and scripted-backend helpers for the test suite."""

from __future__ import annotations

import json

import pytest

from stepeval.core import (
    BenchmarkSample,
    Category,
    ImageKind,
    ImageRef,
    MetricName,
    ReasoningChain,
    StageFields,
    VerificationState,
)
from stepeval.gateway import (
    EndpointConfig,
    MockReply,
    MockTransport,
    ModelGateway,
    VirtualClock,
    match_all,
    match_substring,
    match_system_contains,
)

# The example scorecard line the judge prompt itself demonstrates.
EXAMPLE_SCORECARD_LINE = (
    "{'Faithfulness-Step': 8.0, 'Faithfulness-Token': 7.5, "
    "'Informativeness-Step': 8.5, 'Repetition-Token': 9.0, "
    "'Hallucination': 9.5, 'Redundancy': 8.0, 'Semantic Coverage-Step': 8.5, "
    "'Reasoning Alignment': 8.0, 'Commonsense': 9.0, 'Missing Step': 8.5 , "
    "'Overall Score': 8.65}"
)

EXAMPLE_SCORECARD_VALUES = {
    MetricName.FAITHFULNESS_STEP: 8.0,
    MetricName.FAITHFULNESS_TOKEN: 7.5,
    MetricName.INFORMATIVENESS_STEP: 8.5,
    MetricName.REPETITION_TOKEN: 9.0,
    MetricName.HALLUCINATION: 9.5,
    MetricName.REDUNDANCY: 8.0,
    MetricName.SEMANTIC_COVERAGE_STEP: 8.5,
    MetricName.REASONING_ALIGNMENT: 8.0,
    MetricName.COMMONSENSE: 9.0,
    MetricName.MISSING_STEP: 8.5,
}


def make_image(value: str = "images/q.png") -> ImageRef:
    return ImageRef(kind=ImageKind.FILE_PATH, value=value, media_type="image/png")


def make_inline_image() -> ImageRef:
    return ImageRef(kind=ImageKind.INLINE_BASE64, value="aGk=", media_type="image/png")


def make_chain(num_steps: int = 3, final_answer: str = "B") -> ReasoningChain:
    return ReasoningChain.from_texts(
        [f"Work out part {i} of the problem." for i in range(1, num_steps + 1)],
        final_answer,
    )


def make_sample(
    sample_id: str = "s-001",
    category: Category = Category.VISUAL_REASONING,
    num_steps: int = 3,
    final_answer: str = "B",
    question: str | None = None,
    min_step_exempt: bool = False,
    verification_state: VerificationState = VerificationState.ACCEPTED,
    provenance: str = "unit-fixture",
    stages: StageFields | None = None,
    image: ImageRef | None = None,
) -> BenchmarkSample:
    return BenchmarkSample(
        id=sample_id,
        category=category,
        question=question if question is not None else f"What is shown? [{sample_id}]",
        choices=("A", "B", "C", "D"),
        image=image if image is not None else make_image(),
        ground_truth=make_chain(num_steps, final_answer),
        min_step_exempt=min_step_exempt,
        verification_state=verification_state,
        provenance=provenance,
        stages=stages,
    )


def scorecard_reply(overrides: dict[str, float] | None = None, base: float = 8.0) -> str:
    """JSON scorecard text with all ten keys; values default to ``base``."""
    values = {m.value: base for m in MetricName.ordered()}
    if overrides:
        values.update(overrides)
    values["Overall Score"] = sum(
        values[m.value] for m in MetricName.ordered()
    ) / len(MetricName.ordered())
    return json.dumps(values)


def make_endpoint(
    model_id: str = "target-model",
    base_url: str = "https://mock.invalid/v1",
    **overrides,
) -> EndpointConfig:
    kwargs = dict(
        base_url=base_url,
        model_id=model_id,
        api_key_env="STEPEVAL_TEST_KEY",
        max_in_flight=8,
        requests_per_minute=1_000_000,
        max_retries=2,
        timeout=5.0,
    )
    kwargs.update(overrides)
    return EndpointConfig(**kwargs)


@pytest.fixture
def transport() -> MockTransport:
    return MockTransport()


@pytest.fixture
def clock() -> VirtualClock:
    return VirtualClock()


@pytest.fixture
def gateway(transport: MockTransport, clock: VirtualClock) -> ModelGateway:
    return ModelGateway(transport=transport, clock=clock)


@pytest.fixture
def target_endpoint() -> EndpointConfig:
    return make_endpoint("target-model")


@pytest.fixture
def judge_endpoint() -> EndpointConfig:
    return make_endpoint("judge-model")


def script_eval_sample(
    transport: MockTransport,
    sample: BenchmarkSample,
    response_text: str,
    scorecard_text: str | None = None,
    verdict_text: str = "1",
) -> tuple:
    """Script the three calls one evaluated sample makes: generation,
    step scorecard, and final-answer verdict."""
    tag = f"[{sample.id}]"
    gen_route = transport.script(
        match_all(
            lambda req: req.system is None,
            match_substring(tag),
        ),
        [MockReply.text(response_text)],
    )
    step_route = transport.script(
        match_all(
            match_system_contains("reasoning evaluator"),
            match_substring(tag),
        ),
        [MockReply.text(scorecard_text if scorecard_text is not None else scorecard_reply())],
    )
    final_route = transport.script(
        match_all(
            match_system_contains("helpful Assistant"),
            match_substring(tag),
        ),
        [MockReply.text(verdict_text)],
    )
    return gen_route, step_route, final_route
