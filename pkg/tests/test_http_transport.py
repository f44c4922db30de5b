"""HttpTransport exercised against a local stub chat-completions server."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from stepeval.core import ImageKind, ImageRef
from stepeval.gateway import (
    GENERATION,
    ChatMessage,
    ChatRequest,
    EndpointConfig,
    HttpTransport,
    ImagePart,
    ModelGateway,
    ProtocolError,
    TextPart,
    VirtualClock,
)


class _StubHandler(BaseHTTPRequestHandler):
    server_version = "stub"
    requests: list[dict] = []
    fail_next: list[int] = []

    def do_POST(self):  # noqa: N802 - http.server API
        length = int(self.headers.get("Content-Length", "0"))
        body = json.loads(self.rfile.read(length))
        type(self).requests.append(
            {"path": self.path, "body": body, "auth": self.headers.get("Authorization")}
        )
        if type(self).fail_next:
            status = type(self).fail_next.pop(0)
            self.send_response(status)
            self.end_headers()
            self.wfile.write(b"upstream unhappy")
            return
        n = body.get("n", 1)
        payload = {
            "id": "chatcmpl-stub",
            "model": body["model"],
            "choices": [
                {
                    "index": i,
                    "message": {"role": "assistant", "content": f"stub answer {i}"},
                    "logprobs": {
                        "content": [
                            {"token": "stub", "logprob": -0.5},
                            {"token": "answer", "logprob": -1.5},
                        ]
                    },
                }
                for i in range(n)
            ],
        }
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):  # quiet
        pass


@pytest.fixture
def stub_server():
    _StubHandler.requests = []
    _StubHandler.fail_next = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/v1"
    server.shutdown()
    thread.join(timeout=2)


def make_request(n: int = 1) -> ChatRequest:
    image = ImageRef(kind=ImageKind.INLINE_BASE64, value="aGk=", media_type="image/png")
    return ChatRequest(
        system="be terse",
        messages=(
            ChatMessage(role="user", parts=(TextPart("hello"), ImagePart(image))),
        ),
        max_tokens=32,
        temperature=0.0,
        n=n,
    )


def make_http_endpoint(base_url: str, **overrides) -> EndpointConfig:
    kwargs = dict(
        base_url=base_url,
        model_id="stub-model",
        api_key_env="STEPEVAL_STUB_KEY",
        requests_per_minute=10_000,
        max_retries=2,
        timeout=5.0,
    )
    kwargs.update(overrides)
    return EndpointConfig(**kwargs)


def test_round_trip_with_auth_and_images(stub_server, monkeypatch) -> None:
    monkeypatch.setenv("STEPEVAL_STUB_KEY", "k-123")
    gateway = ModelGateway(transport=HttpTransport())
    endpoint = make_http_endpoint(stub_server)
    response = gateway.complete(endpoint, make_request(), GENERATION)
    assert response.text == "stub answer 0"
    assert response.candidates[0].logprob_sum == pytest.approx(-2.0)
    assert response.candidates[0].token_count == 2

    sent = _StubHandler.requests[-1]
    assert sent["path"] == "/v1/chat/completions"
    assert sent["auth"] == "Bearer k-123"
    assert sent["body"]["model"] == "stub-model"
    assert sent["body"]["max_tokens"] == 32
    assert sent["body"]["messages"][0] == {"role": "system", "content": "be terse"}
    user_content = sent["body"]["messages"][1]["content"]
    assert user_content[0] == {"type": "text", "text": "hello"}
    assert user_content[1]["image_url"]["url"] == "data:image/png;base64,aGk="


def test_multi_sample_n_forwarded(stub_server, monkeypatch) -> None:
    monkeypatch.setenv("STEPEVAL_STUB_KEY", "k")
    gateway = ModelGateway(transport=HttpTransport())
    endpoint = make_http_endpoint(stub_server)
    response = gateway.complete(endpoint, make_request(n=3), GENERATION)
    assert [c.text for c in response.candidates] == [
        "stub answer 0",
        "stub answer 1",
        "stub answer 2",
    ]
    assert _StubHandler.requests[-1]["body"]["n"] == 3
    assert gateway.ledger.generation_calls == 3


def test_429_retried_then_succeeds(stub_server, monkeypatch) -> None:
    monkeypatch.setenv("STEPEVAL_STUB_KEY", "k")
    _StubHandler.fail_next = [429, 503]
    gateway = ModelGateway(
        transport=HttpTransport(), clock=VirtualClock(), backoff_base=0.01
    )
    endpoint = make_http_endpoint(stub_server)
    response = gateway.complete(endpoint, make_request(), GENERATION)
    assert response.text == "stub answer 0"
    assert gateway.ledger.retried_calls == 2


def test_400_is_terminal_protocol_error(stub_server, monkeypatch) -> None:
    monkeypatch.setenv("STEPEVAL_STUB_KEY", "k")
    _StubHandler.fail_next = [400]
    gateway = ModelGateway(transport=HttpTransport())
    endpoint = make_http_endpoint(stub_server)
    with pytest.raises(ProtocolError) as exc_info:
        gateway.complete(endpoint, make_request(), GENERATION)
    assert exc_info.value.status == 400
    assert "upstream unhappy" in exc_info.value.body_excerpt
