from __future__ import annotations

import random

import pytest

from stepeval.beam import (
    BeamConfig,
    InferenceError,
    SelectionStrategy,
    StagePromptSet,
    StrategyError,
    beam_generate,
    default_stage_prompts,
    extract_final_answer,
    pick_default_strategy,
    select_best,
    stage_level_generate,
)
from stepeval.gateway import (
    match_all,
    Candidate,
    MockFailure,
    MockReply,
    MockTransport,
    ModelGateway,
    VirtualClock,
    match_substring,
    match_system_contains,
    request_text,
)

from conftest import make_endpoint, make_image


def cand(
    text: str, logprob_sum: float | None = None, token_count: int | None = None
) -> Candidate:
    return Candidate(text=text, logprob_sum=logprob_sum, token_count=token_count)


class TestExtractFinalAnswer:
    def test_marker_wins(self) -> None:
        text = "Step 1: think.\nFinal Answer: B"
        assert extract_final_answer(text) == "B"

    def test_last_marker_used(self) -> None:
        text = "Final Answer: draft\nmore text\nFinal Answer: C"
        assert extract_final_answer(text) == "C"

    def test_fallback_last_line(self) -> None:
        assert extract_final_answer("reasoning...\n42\n") == "42"


class TestDefaultStrategy:
    def test_logprob_endpoints_rank_by_logprob(self) -> None:
        endpoint = make_endpoint(want_logprobs=True)
        assert pick_default_strategy(endpoint, True) is SelectionStrategy.LOG_PROB
        assert pick_default_strategy(endpoint, False) is SelectionStrategy.LOG_PROB

    def test_multiple_choice_falls_back_to_majority(self) -> None:
        endpoint = make_endpoint()
        assert (
            pick_default_strategy(endpoint, True)
            is SelectionStrategy.MAJORITY_ANSWER
        )

    def test_open_ended_without_logprobs_needs_a_judge(self) -> None:
        endpoint = make_endpoint()
        assert pick_default_strategy(endpoint, False) is SelectionStrategy.JUDGE_RANK


class TestSelectBest:
    def test_majority_plurality(self) -> None:
        candidates = (
            cand("...\nFinal Answer: B"),
            cand("...\nFinal Answer: B"),
            cand("...\nFinal Answer: C"),
        )
        index, reason = select_best(candidates, SelectionStrategy.MAJORITY_ANSWER)
        assert index == 0
        assert "majority_answer" in reason

    def test_majority_tie_breaks_to_lowest_index(self) -> None:
        candidates = (
            cand("...\nFinal Answer: B"),
            cand("...\nFinal Answer: C"),
        )
        index, _ = select_best(candidates, SelectionStrategy.MAJORITY_ANSWER)
        assert index == 0

    def test_log_prob_equal_counts_is_argmax(self) -> None:
        candidates = tuple(
            cand(f"c{i}", logprob_sum=s, token_count=5)
            for i, s in enumerate([-10.0, -4.0, -7.0, -9.0])
        )
        index, _ = select_best(candidates, SelectionStrategy.LOG_PROB)
        assert index == 1

    def test_log_prob_length_normalization(self) -> None:
        # equal raw sums; per-token -3 at index 0 vs -2 at index 1, so
        # normalization must prefer the longer candidate at index 1
        candidates = (
            cand("short", logprob_sum=-6.0, token_count=2),
            cand("longer answer", logprob_sum=-6.0, token_count=3),
        )
        index, reason = select_best(candidates, SelectionStrategy.LOG_PROB)
        assert index == 1
        assert "-2.0" in reason

    def test_log_prob_tie_breaks_to_lowest_index(self) -> None:
        candidates = (
            cand("a", logprob_sum=-4.0, token_count=2),
            cand("b", logprob_sum=-6.0, token_count=3),
        )
        index, _ = select_best(candidates, SelectionStrategy.LOG_PROB)
        assert index == 0

    def test_log_prob_without_logprobs_advises_alternatives(self) -> None:
        candidates = (cand("a"), cand("b"))
        with pytest.raises(StrategyError, match="JudgeRank or MajorityAnswer"):
            select_best(candidates, SelectionStrategy.LOG_PROB)

    def test_single_candidate_is_identity_for_any_strategy(self) -> None:
        for strategy in SelectionStrategy:
            index, reason = select_best((cand("only"),), strategy)
            assert index == 0
            assert reason == "single candidate"

    def test_selection_closure_under_random_candidates(self) -> None:
        rng = random.Random(11)
        for _ in range(50):
            n = rng.randint(1, 6)
            candidates = tuple(
                cand(
                    f"text {rng.randint(0, 3)}\nFinal Answer: {rng.choice('ABCD')}",
                    logprob_sum=-rng.uniform(1, 20),
                    token_count=rng.randint(1, 30),
                )
                for _ in range(n)
            )
            for strategy in (
                SelectionStrategy.LOG_PROB,
                SelectionStrategy.MAJORITY_ANSWER,
            ):
                index, _ = select_best(candidates, strategy)
                assert candidates[index].text in [c.text for c in candidates]


class TestBeamGenerate:
    def test_single_beam_identity(self, gateway, transport, target_endpoint) -> None:
        transport.script_texts(match_substring("what is"), ["42"])
        result = beam_generate(
            gateway,
            target_endpoint,
            "what is the answer",
            make_image(),
            BeamConfig(num_beams=1, strategy=SelectionStrategy.LOG_PROB),
        )
        assert result.selected_text == "42"
        assert result.ledger_delta.generation_calls == 1
        assert result.ledger_delta.judge_calls == 0
        assert gateway.ledger.generation_calls == 1

    def test_log_prob_over_four_beams(self, gateway, transport, target_endpoint) -> None:
        transport.script(
            match_substring("question"),
            [
                MockReply(
                    texts=("c0", "c1", "c2", "c3"),
                    logprob_sums=(-10.0, -4.0, -7.0, -9.0),
                    token_counts=(5, 5, 5, 5),
                )
            ],
        )
        result = beam_generate(
            gateway,
            target_endpoint,
            "question",
            None,
            BeamConfig(num_beams=4, strategy=SelectionStrategy.LOG_PROB),
        )
        assert result.selected_index == 1
        assert result.ledger_delta.generation_calls == 4
        assert result.ledger_delta.judge_calls == 0

    def test_judge_rank_costs_exactly_one_judge_call(
        self, gateway, transport, target_endpoint, judge_endpoint
    ) -> None:
        transport.script(
            match_all(lambda req: req.system is None, match_substring("question")),
            [MockReply(texts=("c0", "c1", "c2", "c3"))],
        )
        transport.script_texts(
            match_system_contains("numbered starting from 1"), ["3"]
        )
        result = beam_generate(
            gateway,
            target_endpoint,
            "question",
            None,
            BeamConfig(num_beams=4, strategy=SelectionStrategy.JUDGE_RANK),
            judge_endpoint=judge_endpoint,
        )
        assert result.selected_index == 2
        assert result.ledger_delta.generation_calls == 4
        assert result.ledger_delta.judge_calls == 1

    def test_selection_stays_within_candidates(
        self, gateway, transport, target_endpoint
    ) -> None:
        texts = ("r0\nFinal Answer: A", "r1\nFinal Answer: A", "r2\nFinal Answer: B")
        transport.script(match_substring("q"), [MockReply(texts=texts)])
        result = beam_generate(
            gateway,
            target_endpoint,
            "q",
            None,
            BeamConfig(num_beams=3, strategy=SelectionStrategy.MAJORITY_ANSWER),
        )
        assert result.selected_text in texts

    def test_partial_failures_select_among_survivors(self, clock) -> None:
        transport = MockTransport()
        gateway = ModelGateway(transport=transport, clock=clock)
        endpoint = make_endpoint(supports_multi_sample=False, max_retries=0)
        transport.script(
            match_substring("q"),
            [
                MockReply.text("ok\nFinal Answer: A"),
                MockFailure(),
                MockReply.text("ok\nFinal Answer: A"),
            ],
        )
        result = beam_generate(
            gateway,
            endpoint,
            "q",
            None,
            BeamConfig(num_beams=3, strategy=SelectionStrategy.MAJORITY_ANSWER),
        )
        assert result.failed_candidates == 1
        assert len(result.candidates) == 2
        assert "1 candidate(s) failed" in result.selection_reason
        assert result.ledger_delta.generation_calls == 2

    def test_all_candidates_failed_is_inference_error(self, clock) -> None:
        transport = MockTransport()
        gateway = ModelGateway(transport=transport, clock=clock)
        endpoint = make_endpoint(supports_multi_sample=False, max_retries=0)
        transport.script(match_substring("q"), [MockFailure(), MockFailure()])
        with pytest.raises(InferenceError, match="all 2 candidates failed"):
            beam_generate(
                gateway,
                endpoint,
                "q",
                None,
                BeamConfig(num_beams=2, strategy=SelectionStrategy.MAJORITY_ANSWER),
            )

    def test_deterministic_under_fixed_scripts(self) -> None:
        def run_once():
            transport = MockTransport()
            gateway = ModelGateway(transport=transport, clock=VirtualClock())
            transport.script(
                match_substring("q"),
                [
                    MockReply(
                        texts=("a\nFinal Answer: X", "b\nFinal Answer: X"),
                        logprob_sums=(-2.0, -3.0),
                        token_counts=(2, 2),
                    )
                ],
            )
            return beam_generate(
                gateway,
                make_endpoint(),
                "q",
                None,
                BeamConfig(num_beams=2, strategy=SelectionStrategy.LOG_PROB),
            )

        assert run_once() == run_once()


def script_stage_generation(transport, prompts: StagePromptSet, num_beams: int):
    """One route per stage, matched by the prompt the request ends with."""
    for stage_index, prompt in enumerate(prompts.as_tuple()):
        texts = tuple(
            f"stage{stage_index + 1} candidate {i}" for i in range(num_beams)
        )

        def ends_with(req, _prompt=prompt):
            return request_text(req).rstrip().endswith(_prompt)

        transport.script(ends_with, [MockReply(texts=texts)])


class TestStageLevelGenerate:
    def test_single_beam_costs_four_generations(
        self, gateway, transport, target_endpoint
    ) -> None:
        prompts = default_stage_prompts()
        script_stage_generation(transport, prompts, 1)
        result = stage_level_generate(
            gateway,
            target_endpoint,
            "question",
            make_image(),
            BeamConfig(num_beams=1, stage_prompts=prompts),
        )
        assert result.ledger_delta.generation_calls == 4
        assert result.ledger_delta.judge_calls == 0
        assert result.stage_winners == (
            "stage1 candidate 0",
            "stage2 candidate 0",
            "stage3 candidate 0",
            "stage4 candidate 0",
        )
        assert result.selected_text == "\n".join(result.stage_winners)

    def test_four_beams_cost_sixteen_and_twelve(
        self, gateway, transport, target_endpoint, judge_endpoint
    ) -> None:
        prompts = default_stage_prompts()
        script_stage_generation(transport, prompts, 4)
        transport.script_texts(
            match_system_contains("two candidate continuations"),
            ["2", "1", "1"] * 4,
        )
        result = stage_level_generate(
            gateway,
            target_endpoint,
            "question",
            None,
            BeamConfig(num_beams=4, stage_prompts=prompts),
            judge_endpoint=judge_endpoint,
        )
        assert result.ledger_delta.generation_calls == 16
        assert result.ledger_delta.judge_calls == 12
        # "2" then "1","1": candidate 1 beats 0 and survives the rest
        assert result.stage_winners[0] == "stage1 candidate 1"

    def test_stage_level_vs_beam_cost_gap_at_two_beams(
        self, target_endpoint, judge_endpoint
    ) -> None:
        transport = MockTransport()
        gateway = ModelGateway(transport=transport, clock=VirtualClock())
        prompts = default_stage_prompts()
        script_stage_generation(transport, prompts, 2)
        transport.script_texts(
            match_system_contains("two candidate continuations"), ["1"] * 4
        )
        stage_result = stage_level_generate(
            gateway,
            target_endpoint,
            "question",
            None,
            BeamConfig(num_beams=2, stage_prompts=prompts),
            judge_endpoint=judge_endpoint,
        )
        stage_total = (
            stage_result.ledger_delta.generation_calls
            + stage_result.ledger_delta.judge_calls
        )
        assert stage_total == 12

        transport2 = MockTransport()
        gateway2 = ModelGateway(transport=transport2, clock=VirtualClock())
        transport2.script(
            match_substring("question"),
            [MockReply(texts=("a\nFinal Answer: X", "b\nFinal Answer: X"))],
        )
        beam_result = beam_generate(
            gateway2,
            target_endpoint,
            "question",
            None,
            BeamConfig(num_beams=2, strategy=SelectionStrategy.MAJORITY_ANSWER),
        )
        beam_total = (
            beam_result.ledger_delta.generation_calls
            + beam_result.ledger_delta.judge_calls
        )
        assert beam_total <= 3
        assert stage_total > beam_total

    def test_invalid_pairwise_reply_is_inference_error(
        self, gateway, transport, target_endpoint, judge_endpoint
    ) -> None:
        prompts = default_stage_prompts()
        script_stage_generation(transport, prompts, 2)
        transport.script_texts(
            match_system_contains("two candidate continuations"), ["maybe 1"]
        )
        with pytest.raises(InferenceError, match="pairwise judge"):
            stage_level_generate(
                gateway,
                target_endpoint,
                "q",
                None,
                BeamConfig(num_beams=2, stage_prompts=prompts),
                judge_endpoint=judge_endpoint,
            )

    def test_multi_beam_without_judge_endpoint_rejected(
        self, gateway, target_endpoint
    ) -> None:
        with pytest.raises(InferenceError, match="judge endpoint"):
            stage_level_generate(
                gateway,
                target_endpoint,
                "q",
                None,
                BeamConfig(num_beams=2),
            )
