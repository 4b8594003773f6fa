"""Chat-completion backends used by agents and the critic."""
from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Protocol

import httpx

from .errors import BackendUnavailableError, InputValidationError, MalformedResponseError

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_TOKENS = 4096
DEFAULT_MAX_CONCURRENCY = 8


@dataclass(frozen=True)
class ChatRequest:
    user_text: str
    system_text: Optional[str] = None
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    model_name: str = ""

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise InputValidationError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise InputValidationError("max_tokens must be positive")

    def messages(self) -> list[dict[str, str]]:
        msgs = []
        if self.system_text:
            msgs.append({"role": "system", "content": self.system_text})
        msgs.append({"role": "user", "content": self.user_text})
        return msgs


@dataclass(frozen=True)
class ChatResponse:
    text: str
    token_usage: Optional[dict[str, Any]] = None
    latency: Optional[float] = None


class ChatBackend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


def fingerprint(user_text: str) -> str:
    """Stable key for scripted responses: sha256 hex of the user text."""
    return hashlib.sha256(user_text.encode("utf-8")).hexdigest()


@dataclass
class ScriptedBackend:
    """Canned responses keyed by request fingerprint; never performs I/O.

    Lookup order: exact fingerprint, then ``rules`` (first ``(substring,
    response)`` pair whose substring occurs in the user text), then
    ``default_response``.
    """

    script: dict[str, str] = field(default_factory=dict)
    default_response: str = ""
    rules: list[tuple[str, str]] = field(default_factory=list)

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = fingerprint(request.user_text)
        if key in self.script:
            return ChatResponse(self.script[key])
        for needle, response in self.rules:
            if needle in request.user_text:
                return ChatResponse(response)
        return ChatResponse(self.default_response)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        """Load ``{"responses": {fp: text}, "rules": [{"contains", "response"}], "default": text}``."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, Mapping):
            raise InputValidationError(f"{path}: script must be a JSON object")
        rules = [(r["contains"], r["response"]) for r in data.get("rules", [])]
        return cls(dict(data.get("responses", {})), str(data.get("default", "")), rules)


class CallbackBackend:
    """Wraps a pure function of the request; records every request it sees.

    Used to script protocol-aware fake agents and critics.
    """

    def __init__(self, fn: Callable[[ChatRequest], str]) -> None:
        self._fn = fn
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
        return ChatResponse(self._fn(request))


class HttpChatBackend:
    """Client for the chat-completions wire protocol.

    Transient failures (connection errors, 429, 5xx) are retried with
    exponential backoff; at most ``max_concurrency`` requests are in flight.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: Optional[str] = None,
        *,
        timeout: float = 120.0,
        max_attempts: int = 3,
        backoff: float = 1.0,
        max_concurrency: int = DEFAULT_MAX_CONCURRENCY,
        client: Optional[httpx.Client] = None,
    ) -> None:
        if max_attempts < 1:
            raise InputValidationError("max_attempts must be >= 1")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key = api_key
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._sem = threading.BoundedSemaphore(max_concurrency)
        self._client = client or httpx.Client(timeout=timeout)

    def _payload(self, request: ChatRequest) -> dict[str, Any]:
        return {
            "model": request.model_name or self.model,
            "messages": request.messages(),
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def complete(self, request: ChatRequest) -> ChatResponse:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        payload = self._payload(request)
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            start = time.monotonic()
            try:
                with self._sem:
                    resp = self._client.post(self.url, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                last = exc
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = BackendUnavailableError(f"HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise BackendUnavailableError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    return self._parse(resp, time.monotonic() - start)
            if attempt + 1 < self.max_attempts:
                delay = self.backoff * 2**attempt
                log.warning("chat request failed (%s); retrying in %.1fs", last, delay)
                time.sleep(delay)
        raise BackendUnavailableError(f"chat endpoint unavailable after {self.max_attempts} attempts: {last}")

    @staticmethod
    def _parse(resp: httpx.Response, latency: float) -> ChatResponse:
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"response missing choices[0].message.content: {exc}") from exc
        if not isinstance(text, str):
            raise MalformedResponseError("message content is not text")
        return ChatResponse(text, body.get("usage"), latency)

    def close(self) -> None:
        self._client.close()
