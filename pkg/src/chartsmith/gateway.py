"""Uniform access to chat-completion backends that accept text and images.

Backends expose a single ``complete(request)`` method. Two implementations
ship here: an HTTP client speaking the OpenAI-compatible chat-completions
wire shape (images as base64 data URLs), and a scripted queue backend that
replays canned responses for offline runs and tests.
"""

from __future__ import annotations

import base64
import io
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import requests
from PIL import Image

from .errors import (
    AuthError,
    ProtocolError,
    RefusalError,
    ScriptExhausted,
    TransportError,
)

ROLES = ("system", "user", "assistant")

API_KEY_ENV = "CHARTSMITH_API_KEY"


@dataclass(frozen=True)
class TokenUsage:
    """Prompt/completion token counts for one model call."""

    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens


def estimate_completion_tokens(text: str) -> int:
    """Fallback usage estimate for backends that do not report usage."""
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class ContentPart:
    """One message part: either text or an encoded raster image."""

    kind: str
    text: str | None = None
    image: bytes | None = None
    media_type: str = "image/png"

    def __post_init__(self):
        if self.kind == "text":
            if self.text is None or self.image is not None:
                raise ValueError("text part must carry text and nothing else")
        elif self.kind == "image":
            if self.image is None or self.text is not None:
                raise ValueError("image part must carry image bytes and nothing else")
            try:
                Image.open(io.BytesIO(self.image)).verify()
            except Exception as exc:
                raise ValueError(f"image part does not decode: {exc}") from exc
        else:
            raise ValueError(f"unknown part kind {self.kind!r}")

    @classmethod
    def from_text(cls, text: str) -> "ContentPart":
        return cls(kind="text", text=text)

    @classmethod
    def from_image(cls, data: bytes, media_type: str = "image/png") -> "ContentPart":
        return cls(kind="image", image=data, media_type=media_type)


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[ContentPart, ...]

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if not self.parts:
            raise ValueError("message must have at least one part")
        object.__setattr__(self, "parts", tuple(self.parts))

    @classmethod
    def user(cls, parts: Sequence[ContentPart]) -> "ChatMessage":
        return cls(role="user", parts=tuple(parts))


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    max_tokens: int
    temperature: float

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("request must contain at least one message")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


@dataclass(frozen=True)
class ChatResponse:
    """Assistant text plus usage; `usage_estimated` marks synthesized counts."""

    text: str
    usage: TokenUsage = field(default_factory=TokenUsage)
    usage_estimated: bool = False


class Backend(Protocol):
    """Anything that can answer a chat request."""

    def complete(self, request: ChatRequest) -> ChatResponse: ...


def complete(backend: Backend, request: ChatRequest) -> ChatResponse:
    """Validated completion call through any backend.

    Raises RefusalError when the assistant text is empty; transport,
    protocol, and auth failures propagate from the backend.
    """
    if not isinstance(request, ChatRequest):
        raise TypeError("request must be a ChatRequest")
    response = backend.complete(request)
    if not response.text.strip():
        raise RefusalError("backend returned an empty assistant message")
    return response


class ScriptedBackend:
    """Replays a fixed queue of responses; raises once the queue is empty.

    Every received request is appended to ``calls`` so tests can inspect
    the exact prompts that were sent.
    """

    def __init__(self, script: Sequence[ChatResponse]):
        if not script:
            raise ValueError("script must be non-empty")
        self._script = list(script)
        self._next = 0
        self._lock = threading.Lock()
        self.calls: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(request)
            if self._next >= len(self._script):
                raise ScriptExhausted(
                    f"scripted backend exhausted after {len(self._script)} calls"
                )
            response = self._script[self._next]
            self._next += 1
        return response

    @property
    def remaining(self) -> int:
        with self._lock:
            return len(self._script) - self._next


def scripted_backend(script: Sequence[ChatResponse]) -> ScriptedBackend:
    return ScriptedBackend(script)


def _part_to_wire(part: ContentPart) -> dict:
    if part.kind == "text":
        return {"type": "text", "text": part.text}
    payload = base64.b64encode(part.image).decode("ascii")
    return {
        "type": "image_url",
        "image_url": {"url": f"data:{part.media_type};base64,{payload}"},
    }


def _content_text(content) -> str:
    # Servers answer either a plain string or a list of typed parts.
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        chunks = []
        for item in content:
            if isinstance(item, dict) and item.get("type") == "text":
                chunks.append(item.get("text", ""))
        return "".join(chunks)
    raise ProtocolError(f"unexpected content shape: {type(content).__name__}")


class HttpBackend:
    """OpenAI-compatible chat-completions client.

    Retries transport-level failures (connection errors, timeouts, 429/5xx)
    with exponential backoff; auth rejections are never retried. Immutable
    after construction and safe to share across threads.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        max_attempts: int = 3,
        backoff: Sequence[float] = (1.0, 2.0, 4.0),
    ):
        self._base_url = base_url.rstrip("/")
        self._api_key = api_key
        self._timeout = timeout
        self._max_attempts = max_attempts
        self._backoff = tuple(backoff)

    def _sleep(self, attempt: int) -> None:
        idx = min(attempt, len(self._backoff) - 1)
        time.sleep(self._backoff[idx])

    def complete(self, request: ChatRequest) -> ChatResponse:
        body = {
            "model": request.model_id,
            "messages": [
                {"role": m.role, "content": [_part_to_wire(p) for p in m.parts]}
                for m in request.messages
            ],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"

        last_error: Exception | None = None
        for attempt in range(self._max_attempts):
            try:
                resp = requests.post(
                    f"{self._base_url}/chat/completions",
                    json=body,
                    headers=headers,
                    timeout=self._timeout,
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
                if attempt + 1 < self._max_attempts:
                    self._sleep(attempt)
                continue

            if resp.status_code in (401, 403):
                raise AuthError(f"credential rejected (HTTP {resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = TransportError(f"HTTP {resp.status_code}")
                if attempt + 1 < self._max_attempts:
                    self._sleep(attempt)
                continue
            if resp.status_code >= 400:
                raise ProtocolError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            return self._parse(resp)

        raise TransportError(
            f"gave up after {self._max_attempts} attempts: {last_error}"
        )

    @staticmethod
    def _parse(resp) -> ChatResponse:
        try:
            data = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"response body is not JSON: {exc}") from exc
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"missing choices[0].message.content: {exc}") from exc
        text = _content_text(content)

        usage = data.get("usage") or {}
        if "completion_tokens" in usage or "prompt_tokens" in usage:
            return ChatResponse(
                text=text,
                usage=TokenUsage(
                    int(usage.get("prompt_tokens", 0)),
                    int(usage.get("completion_tokens", 0)),
                ),
            )
        return ChatResponse(
            text=text,
            usage=TokenUsage(0, estimate_completion_tokens(text)),
            usage_estimated=True,
        )
