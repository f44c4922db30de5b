from __future__ import annotations

import threading
import time

import pytest

from stepeval.gateway import (
    GENERATION,
    JUDGE,
    CallLedger,
    ChatMessage,
    ChatRequest,
    MockFailure,
    MockReply,
    MockScriptError,
    MockTransport,
    ModelGateway,
    ProtocolError,
    SystemClock,
    TransportError,
    VirtualClock,
    match_exact,
    match_substring,
    match_system_contains,
    request_hash,
)

from conftest import make_endpoint


def text_request(text: str, system: str | None = None, n: int = 1) -> ChatRequest:
    return ChatRequest(
        system=system,
        messages=(ChatMessage.text("user", text),),
        max_tokens=64,
        temperature=0.0,
        n=n,
    )


class TestRequestValidation:
    def test_empty_messages_rejected(self) -> None:
        with pytest.raises(ValueError, match="at least one message"):
            ChatRequest(messages=(), max_tokens=10, temperature=0.0)

    def test_zero_candidates_rejected(self) -> None:
        with pytest.raises(ValueError, match="n must be >= 1"):
            text_request("x", n=0)

    def test_negative_temperature_rejected(self) -> None:
        with pytest.raises(ValueError, match="temperature"):
            ChatRequest(
                messages=(ChatMessage.text("user", "x"),),
                max_tokens=10,
                temperature=-0.1,
            )


class TestMockScripting:
    def test_scripted_passthrough_increments_generation(self, gateway, transport) -> None:
        endpoint = make_endpoint()
        transport.script_texts(match_substring("PING"), ["PONG"])
        response = gateway.complete(endpoint, text_request("PING"), GENERATION)
        assert response.text == "PONG"
        assert gateway.ledger.generation_calls == 1
        assert gateway.ledger.judge_calls == 0

    def test_judge_purpose_counts_separately(self, gateway, transport) -> None:
        endpoint = make_endpoint()
        transport.script_texts(match_substring("PING"), ["PONG"])
        gateway.complete(endpoint, text_request("PING"), JUDGE)
        assert gateway.ledger.judge_calls == 1
        assert gateway.ledger.generation_calls == 0

    def test_script_exhaustion_is_an_error(self, gateway, transport) -> None:
        endpoint = make_endpoint()
        transport.script_texts(match_substring("PING"), ["PONG"])
        gateway.complete(endpoint, text_request("PING"), GENERATION)
        with pytest.raises(MockScriptError, match="script exhausted"):
            gateway.complete(endpoint, text_request("PING"), GENERATION)

    def test_unmatched_request_names_its_hash(self, gateway, transport) -> None:
        endpoint = make_endpoint()
        request = text_request("nothing matches this")
        with pytest.raises(MockScriptError, match=request_hash(request)):
            gateway.complete(endpoint, request, GENERATION)

    def test_routes_consume_independently(self, gateway, transport) -> None:
        endpoint = make_endpoint()
        route_a = transport.script_texts(match_substring("alpha"), ["a1", "a2"])
        route_b = transport.script_texts(match_substring("beta"), ["b1", "b2"])
        assert gateway.complete(endpoint, text_request("alpha"), GENERATION).text == "a1"
        assert gateway.complete(endpoint, text_request("beta"), GENERATION).text == "b1"
        assert gateway.complete(endpoint, text_request("alpha"), GENERATION).text == "a2"
        assert gateway.complete(endpoint, text_request("beta"), GENERATION).text == "b2"
        assert route_a.remaining == 0
        assert route_b.remaining == 0

    def test_exact_matcher_uses_request_hash(self, gateway, transport) -> None:
        endpoint = make_endpoint()
        request = text_request("exact body", system="sys")
        transport.script_texts(match_exact(request), ["matched"])
        assert gateway.complete(endpoint, request, GENERATION).text == "matched"
        with pytest.raises(MockScriptError, match="no script"):
            gateway.complete(endpoint, text_request("different"), GENERATION)

    def test_substring_matcher_scopes_to_judge_prompts(self, gateway, transport) -> None:
        endpoint = make_endpoint()
        transport.script_texts(
            match_system_contains("reasoning evaluator"), ["judge reply"]
        )
        judge_request = text_request(
            "score this", system="You are a reasoning evaluator designed to assess"
        )
        plain_request = text_request("score this")
        assert gateway.complete(endpoint, judge_request, JUDGE).text == "judge reply"
        with pytest.raises(MockScriptError):
            gateway.complete(endpoint, plain_request, GENERATION)

    def test_mock_determinism(self) -> None:
        def run_once() -> list:
            transport = MockTransport()
            gateway = ModelGateway(transport=transport, clock=VirtualClock())
            endpoint = make_endpoint()
            transport.script_texts(match_substring("q1"), ["r1", "r2"])
            transport.script_texts(match_substring("q2"), ["r3"])
            out = [
                gateway.complete(endpoint, text_request("q1"), GENERATION),
                gateway.complete(endpoint, text_request("q2"), JUDGE),
                gateway.complete(endpoint, text_request("q1"), GENERATION),
            ]
            return out

        assert run_once() == run_once()


class TestRetries:
    def test_fail_twice_then_succeed(self, transport, clock) -> None:
        gateway = ModelGateway(transport=transport, clock=clock)
        endpoint = make_endpoint(max_retries=3)
        transport.script(
            match_substring("flaky"),
            [MockFailure(), MockFailure(), MockReply.text("recovered")],
        )
        response = gateway.complete(endpoint, text_request("flaky"), GENERATION)
        assert response.text == "recovered"
        assert gateway.ledger.retried_calls == 2
        assert gateway.ledger.generation_calls == 1

    def test_retries_exhausted_raises_transport_error(self, transport, clock) -> None:
        gateway = ModelGateway(transport=transport, clock=clock)
        endpoint = make_endpoint(max_retries=2)
        transport.script(
            match_substring("dead"),
            [MockFailure(), MockFailure(), MockFailure()],
        )
        with pytest.raises(TransportError, match="retries exhausted"):
            gateway.complete(endpoint, text_request("dead"), GENERATION)
        assert gateway.ledger.retried_calls == 2
        assert gateway.ledger.generation_calls == 0

    def test_terminal_status_is_protocol_error_without_retry(
        self, transport, clock
    ) -> None:
        gateway = ModelGateway(transport=transport, clock=clock)
        endpoint = make_endpoint(max_retries=3)
        transport.script(
            match_substring("bad"),
            [MockFailure(transient=False, status=400, body="bad request")],
        )
        with pytest.raises(ProtocolError) as exc_info:
            gateway.complete(endpoint, text_request("bad"), GENERATION)
        assert exc_info.value.status == 400
        assert gateway.ledger.retried_calls == 0

    def test_backoff_sleeps_grow_exponentially(self, transport) -> None:
        clock = VirtualClock()
        gateway = ModelGateway(transport=transport, clock=clock, backoff_base=1.0)
        endpoint = make_endpoint(max_retries=2)
        transport.script(
            match_substring("slow"),
            [MockFailure(), MockFailure(), MockReply.text("done")],
        )
        gateway.complete(endpoint, text_request("slow"), GENERATION)
        # 1.0 + 2.0 seconds of virtual backoff
        assert clock.monotonic() == pytest.approx(3.0)


class TestLedger:
    def test_conservation_over_mixed_purposes(self, gateway, transport) -> None:
        endpoint = make_endpoint()
        transport.script_texts(match_substring("g"), ["x"] * 5)
        transport.script_texts(match_substring("j"), ["y"] * 3)
        for _ in range(5):
            gateway.complete(endpoint, text_request("g call"), GENERATION)
        for _ in range(3):
            gateway.complete(endpoint, text_request("j call"), JUDGE)
        ledger = gateway.ledger
        assert ledger.generation_calls + ledger.judge_calls == 8
        assert len(ledger.records) == 8

    def test_counters_monotone(self, gateway, transport) -> None:
        endpoint = make_endpoint()
        transport.script_texts(match_substring("x"), ["a"] * 4)
        seen = []
        for _ in range(4):
            gateway.complete(endpoint, text_request("x"), GENERATION)
            seen.append(gateway.ledger.snapshot())
        for before, after in zip(seen, seen[1:]):
            assert after.generation_calls >= before.generation_calls
            assert after.judge_calls >= before.judge_calls
            assert after.retried_calls >= before.retried_calls

    def test_scope_ledger_mirrors_calls(self, gateway, transport) -> None:
        endpoint = make_endpoint()
        transport.script_texts(match_substring("x"), ["a", "b"])
        scope = CallLedger()
        gateway.complete(endpoint, text_request("x"), GENERATION, scope=scope)
        gateway.complete(endpoint, text_request("x"), JUDGE, scope=scope)
        assert scope.snapshot().to_dict() == {
            "generation_calls": 1,
            "judge_calls": 1,
            "retried_calls": 0,
        }

    def test_multi_sample_request_counts_n_calls(self, gateway, transport) -> None:
        endpoint = make_endpoint()
        transport.script(
            match_substring("multi"),
            [MockReply(texts=("a", "b", "c", "d"))],
        )
        response = gateway.complete(endpoint, text_request("multi", n=4), GENERATION)
        assert len(response.candidates) == 4
        assert gateway.ledger.generation_calls == 4
        assert len(gateway.ledger.records) == 4


class TestFanOut:
    def test_endpoint_without_multi_sample_fans_out(self, gateway, transport) -> None:
        endpoint = make_endpoint(supports_multi_sample=False)
        transport.script_texts(match_substring("fan"), ["r1", "r2", "r3"])
        response = gateway.complete(endpoint, text_request("fan", n=3), GENERATION)
        assert sorted(c.text for c in response.candidates) == ["r1", "r2", "r3"]
        assert gateway.ledger.generation_calls == 3

    def test_fan_out_partial_failure_returns_survivors(self, transport, clock) -> None:
        gateway = ModelGateway(transport=transport, clock=clock)
        endpoint = make_endpoint(supports_multi_sample=False, max_retries=0)
        transport.script(
            match_substring("fan"),
            [MockReply.text("ok"), MockFailure(), MockReply.text("ok")],
        )
        response = gateway.complete(endpoint, text_request("fan", n=3), GENERATION)
        assert len(response.candidates) == 2
        assert gateway.ledger.generation_calls == 2

    def test_fan_out_total_failure_raises(self, transport, clock) -> None:
        gateway = ModelGateway(transport=transport, clock=clock)
        endpoint = make_endpoint(supports_multi_sample=False, max_retries=0)
        transport.script(
            match_substring("fan"), [MockFailure(), MockFailure()]
        )
        with pytest.raises(TransportError, match="fan-out"):
            gateway.complete(endpoint, text_request("fan", n=2), GENERATION)


class TestRateLimiting:
    def test_sliding_window_never_exceeds_rate(self) -> None:
        clock = VirtualClock()
        transport = MockTransport()
        stamps: list[float] = []

        class Recording:
            def send(self, endpoint, request):
                stamps.append(clock.monotonic())
                return transport.send(endpoint, request)

        gateway = ModelGateway(transport=Recording(), clock=clock)
        endpoint = make_endpoint(requests_per_minute=3)
        transport.script_texts(match_substring("x"), ["r"] * 8)
        for _ in range(8):
            gateway.complete(endpoint, text_request("x"), GENERATION)
        assert len(stamps) == 8
        for i, start in enumerate(stamps):
            in_window = [s for s in stamps if start <= s < start + 60.0]
            assert len(in_window) <= 3

    def test_dispatches_wait_for_the_window_to_roll(self) -> None:
        clock = VirtualClock()
        transport = MockTransport()
        gateway = ModelGateway(transport=transport, clock=clock)
        endpoint = make_endpoint(requests_per_minute=2)
        transport.script_texts(match_substring("x"), ["r"] * 3)
        for _ in range(3):
            gateway.complete(endpoint, text_request("x"), GENERATION)
        # the third dispatch needed the first stamp to leave the window
        assert clock.monotonic() >= 60.0


class TestBoundedConcurrency:
    def test_in_flight_never_exceeds_max(self) -> None:
        inner = MockTransport()
        lock = threading.Lock()
        state = {"active": 0, "max": 0}

        class Gated:
            def send(self, endpoint, request):
                with lock:
                    state["active"] += 1
                    state["max"] = max(state["max"], state["active"])
                time.sleep(0.01)
                try:
                    return inner.send(endpoint, request)
                finally:
                    with lock:
                        state["active"] -= 1

        gateway = ModelGateway(transport=Gated(), clock=SystemClock())
        endpoint = make_endpoint(max_in_flight=2)
        inner.script_texts(match_substring("x"), ["r"] * 10)

        threads = [
            threading.Thread(
                target=gateway.complete, args=(endpoint, text_request("x"), GENERATION)
            )
            for _ in range(10)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert state["max"] <= 2
        assert gateway.ledger.generation_calls == 10


class TestWireLog:
    def test_log_records_requests_without_secrets(self, tmp_path, monkeypatch) -> None:
        import json

        monkeypatch.setenv("STEPEVAL_TEST_KEY", "super-secret-value")
        log_path = tmp_path / "wire.jsonl"
        transport = MockTransport()
        gateway = ModelGateway(
            transport=transport, clock=VirtualClock(), wire_log=log_path
        )
        endpoint = make_endpoint()
        transport.script_texts(match_substring("hello"), ["world"])
        gateway.complete(endpoint, text_request("hello"), GENERATION)
        content = log_path.read_text()
        record = json.loads(content)
        assert record["purpose"] == "generation"
        assert record["candidates"] == ["world"]
        assert "super-secret-value" not in content
