"""Gateway types, scripted backend semantics, and the HTTP client."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from chartsmith.errors import (
    AuthError,
    ProtocolError,
    RefusalError,
    ScriptExhausted,
    TransportError,
)
from chartsmith.gateway import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    ContentPart,
    HttpBackend,
    ScriptedBackend,
    TokenUsage,
    complete,
    estimate_completion_tokens,
    scripted_backend,
)

from conftest import resp, solid_canvas


def text_request(text: str = "hello") -> ChatRequest:
    return ChatRequest(
        model_id="m",
        messages=(ChatMessage.user([ContentPart.from_text(text)]),),
        max_tokens=100,
        temperature=0.0,
    )


# ---------------------------------------------------------------------------
# types


def test_request_requires_messages():
    with pytest.raises(ValueError):
        ChatRequest(model_id="m", messages=(), max_tokens=10, temperature=0.0)


def test_request_requires_positive_max_tokens():
    msg = ChatMessage.user([ContentPart.from_text("x")])
    with pytest.raises(ValueError):
        ChatRequest(model_id="m", messages=(msg,), max_tokens=0, temperature=0.0)


def test_message_requires_parts_and_known_role():
    with pytest.raises(ValueError):
        ChatMessage(role="user", parts=())
    with pytest.raises(ValueError):
        ChatMessage(role="robot", parts=(ContentPart.from_text("x"),))


def test_part_payload_must_match_kind():
    with pytest.raises(ValueError):
        ContentPart(kind="text", text=None)
    with pytest.raises(ValueError):
        ContentPart(kind="image", image=b"not a png")
    part = ContentPart.from_image(solid_canvas((0, 0, 0)))
    assert part.media_type == "image/png"


def test_usage_non_negative_and_additive():
    with pytest.raises(ValueError):
        TokenUsage(-1, 0)
    total = TokenUsage(100, 50) + TokenUsage(200, 60)
    assert (total.prompt_tokens, total.completion_tokens) == (300, 110)


def test_estimate_completion_tokens():
    assert estimate_completion_tokens("") == 0
    assert estimate_completion_tokens("abcd") == 1
    assert estimate_completion_tokens("abcde") == 2


# ---------------------------------------------------------------------------
# scripted backend


def test_scripted_pops_in_order():
    backend = scripted_backend([resp("a"), resp("b"), resp("c")])
    out = [complete(backend, text_request()).text for _ in range(3)]
    assert out == ["a", "b", "c"]


def test_scripted_exhaustion():
    backend = scripted_backend([resp("only")])
    complete(backend, text_request())
    with pytest.raises(ScriptExhausted):
        complete(backend, text_request())


def test_scripted_requires_nonempty_script():
    with pytest.raises(ValueError):
        ScriptedBackend([])


def test_scripted_replay_is_identical():
    script = [resp("a", 1, 2), resp("b", 3, 4)]
    first = [ScriptedBackend(script).complete(text_request()) for _ in range(1)]
    second = [ScriptedBackend(script).complete(text_request()) for _ in range(1)]
    assert first == second


def test_scripted_records_requests():
    backend = scripted_backend([resp("a")])
    request = text_request("inspect me")
    complete(backend, request)
    assert backend.calls == [request]
    assert backend.calls[0].messages[0].parts[0].text == "inspect me"


def test_complete_does_not_mutate_request():
    backend = scripted_backend([resp("a")])
    request = text_request("fixed")
    before = request
    complete(backend, request)
    assert request == before


def test_cumulative_usage_sums():
    backend = scripted_backend([resp("a", 100, 50), resp("b", 200, 60)])
    total = TokenUsage()
    for _ in range(2):
        total = total + complete(backend, text_request()).usage
    assert (total.prompt_tokens, total.completion_tokens) == (300, 110)


def test_empty_reply_raises_refusal():
    backend = scripted_backend([resp("")])
    with pytest.raises(RefusalError):
        complete(backend, text_request())


# ---------------------------------------------------------------------------
# HTTP backend against a local stub server


class _StubServer:
    """Tiny chat-completions stand-in with a programmable response queue."""

    def __init__(self):
        self.responses: list[tuple[int, object]] = []
        self.requests: list[dict] = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                stub.requests.append(json.loads(self.rfile.read(length)))
                status, body = (
                    stub.responses.pop(0) if stub.responses else (200, stub.ok_body())
                )
                payload = body if isinstance(body, str) else json.dumps(body)
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(payload.encode())

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @staticmethod
    def ok_body(text: str = "fine", usage: bool = True) -> dict:
        body = {"choices": [{"message": {"content": text}}]}
        if usage:
            body["usage"] = {"prompt_tokens": 7, "completion_tokens": 9}
        return body

    @property
    def url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture()
def stub():
    server = _StubServer()
    yield server
    server.close()


def fast_backend(url: str, **kwargs) -> HttpBackend:
    return HttpBackend(base_url=url, backoff=(0.0, 0.0, 0.0), **kwargs)


def test_http_wire_shape(stub):
    backend = fast_backend(stub.url, api_key="sk-test")
    image = solid_canvas((10, 20, 30))
    request = ChatRequest(
        model_id="vision-model",
        messages=(
            ChatMessage.user(
                [ContentPart.from_text("describe"), ContentPart.from_image(image)]
            ),
        ),
        max_tokens=64,
        temperature=0.5,
    )
    response = complete(backend, request)
    assert response.text == "fine"
    assert response.usage == TokenUsage(7, 9)
    assert not response.usage_estimated

    sent = stub.requests[0]
    assert sent["model"] == "vision-model"
    assert sent["max_tokens"] == 64
    assert sent["temperature"] == 0.5
    content = sent["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": "describe"}
    assert content[1]["type"] == "image_url"
    assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")


def test_http_retries_transient_then_succeeds(stub):
    stub.responses = [(500, "boom"), (503, "boom"), (200, stub.ok_body("ok"))]
    backend = fast_backend(stub.url)
    assert backend.complete(text_request()).text == "ok"
    assert len(stub.requests) == 3


def test_http_transport_error_after_retry_budget(stub):
    stub.responses = [(500, "a"), (500, "b"), (500, "c")]
    backend = fast_backend(stub.url)
    with pytest.raises(TransportError):
        backend.complete(text_request())
    assert len(stub.requests) == 3


def test_http_auth_error_not_retried(stub):
    stub.responses = [(401, "no")]
    backend = fast_backend(stub.url)
    with pytest.raises(AuthError):
        backend.complete(text_request())
    assert len(stub.requests) == 1


def test_http_protocol_error_on_bad_json(stub):
    stub.responses = [(200, "this is not json")]
    backend = fast_backend(stub.url)
    with pytest.raises(ProtocolError):
        backend.complete(text_request())


def test_http_protocol_error_on_missing_choices(stub):
    stub.responses = [(200, {"nothing": True})]
    backend = fast_backend(stub.url)
    with pytest.raises(ProtocolError):
        backend.complete(text_request())


def test_http_estimates_missing_usage(stub):
    stub.responses = [(200, {"choices": [{"message": {"content": "abcdefgh"}}]})]
    backend = fast_backend(stub.url)
    response = backend.complete(text_request())
    assert response.usage_estimated
    assert response.usage.completion_tokens == 2  # ceil(8 / 4)


def test_http_list_content_parts(stub):
    body = {
        "choices": [
            {"message": {"content": [{"type": "text", "text": "joined"}]}}
        ],
        "usage": {"prompt_tokens": 1, "completion_tokens": 2},
    }
    stub.responses = [(200, body)]
    backend = fast_backend(stub.url)
    assert backend.complete(text_request()).text == "joined"


def test_http_connection_refused_raises_transport():
    backend = HttpBackend(base_url="http://127.0.0.1:9", backoff=(0.0, 0.0, 0.0))
    with pytest.raises(TransportError):
        backend.complete(text_request())
