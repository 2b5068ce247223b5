"""Uniform generation contract over model backends.

Two clients ship: ScriptedClient replays canned responses keyed by a stable
request fingerprint (all tests, all offline CLI runs), and RemoteClient talks
to an OpenAI-style chat-completions endpoint for live use. Both enforce the
same response contract: any tool call in a response must name a tool that was
offered in the request.

The fingerprint is a digest over messages and tool schemas after canonical
JSON serialization, so key order inside tool arguments never matters.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol

from .core import DelveError, Message, ToolCall

__all__ = [
    "Client",
    "GatewayError",
    "GatewayTimeout",
    "GenerationRequest",
    "GenerationResponse",
    "MalformedToolCall",
    "RemoteClient",
    "RemoteConfig",
    "Sampling",
    "ScriptMiss",
    "ScriptedClient",
    "fingerprint",
    "request_fingerprint",
    "text_response",
    "tool_call_response",
]


class GatewayError(DelveError):
    pass


class GatewayTimeout(GatewayError):
    """Remote call did not complete within the configured deadline."""


class MalformedToolCall(GatewayError):
    """Response invoked a tool that was not offered, or arguments were invalid."""


class ScriptMiss(GatewayError):
    """ScriptedClient had no entry for the request fingerprint and no fallback."""


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.0
    max_output_chars: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class GenerationRequest:
    messages: tuple[Message, ...]
    available_tools: tuple[dict, ...] = ()
    sampling: Sampling = Sampling()

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.messages[0].role != "system":
            raise ValueError("first message must be the system prompt")


@dataclass(frozen=True)
class GenerationResponse:
    message: Message
    finish_reason: str = "stop"

    def __post_init__(self) -> None:
        if self.finish_reason not in ("stop", "tool_call", "length"):
            raise ValueError(f"bad finish_reason {self.finish_reason!r}")
        if self.finish_reason == "tool_call" and not self.message.tool_calls:
            raise ValueError("finish_reason=tool_call requires tool calls")

    def to_dict(self) -> dict:
        return {"message": self.message.to_dict(), "finish_reason": self.finish_reason}

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationResponse":
        return cls(
            message=Message.from_dict(data["message"]),
            finish_reason=data.get("finish_reason", "stop"),
        )


def fingerprint(messages: Iterable[Message], tools: Iterable[dict] = ()) -> str:
    payload = {
        "messages": [m.to_dict() for m in messages],
        "tools": list(tools),
    }
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def request_fingerprint(request: GenerationRequest) -> str:
    return fingerprint(request.messages, request.available_tools)


class Client(Protocol):
    def generate(self, request: GenerationRequest) -> GenerationResponse: ...


def _check_response(request: GenerationRequest, response: GenerationResponse) -> None:
    offered = {t.get("name") for t in request.available_tools}
    for call in response.message.tool_calls:
        if call.name not in offered:
            raise MalformedToolCall(
                f"response called {call.name!r}; offered tools: {sorted(filter(None, offered))}"
            )
        if not isinstance(call.arguments, dict):
            raise MalformedToolCall(f"arguments of {call.name!r} are not an object")


def _apply_truncation(request: GenerationRequest, response: GenerationResponse) -> GenerationResponse:
    cap = request.sampling.max_output_chars
    if cap is None or response.message.char_len() <= cap:
        return response
    msg = Message(
        role=response.message.role,
        content=response.message.content[:cap],
        tool_calls=(),
        tool_call_id=response.message.tool_call_id,
    )
    return GenerationResponse(message=msg, finish_reason="length")


# --- scripted client ---------------------------------------------------------


class ScriptedClient:
    """Deterministic playback client.

    script maps request fingerprints to responses. A configured fallback
    response answers unknown fingerprints; without one, ScriptMiss is raised.
    The same fingerprint always yields the same response, and the client
    never retries.
    """

    def __init__(
        self,
        script: dict[str, GenerationResponse] | None = None,
        fallback: GenerationResponse | None = None,
    ) -> None:
        self.script = dict(script or {})
        self.fallback = fallback
        self.calls = 0

    def add(self, messages: Iterable[Message], tools: Iterable[dict], response: GenerationResponse) -> str:
        fp = fingerprint(messages, tools)
        self.script[fp] = response
        return fp

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        self.calls += 1
        fp = request_fingerprint(request)
        response = self.script.get(fp)
        if response is None:
            if self.fallback is None:
                tail = request.messages[-1].content[:200]
                raise ScriptMiss(f"no scripted response for {fp} (last message: {tail!r})")
            response = self.fallback
        _check_response(request, response)
        return _apply_truncation(request, response)

    @classmethod
    def from_jsonl(cls, path: str, fallback: GenerationResponse | None = None) -> "ScriptedClient":
        script: dict[str, GenerationResponse] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                script[rec["fingerprint"]] = GenerationResponse.from_dict(rec["response"])
        return cls(script, fallback)

    def to_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for fp, resp in sorted(self.script.items()):
                fh.write(json.dumps({"fingerprint": fp, "response": resp.to_dict()}) + "\n")


def text_response(content: str, finish_reason: str = "stop") -> GenerationResponse:
    return GenerationResponse(Message(role="assistant", content=content), finish_reason)


def tool_call_response(content: str, calls: Iterable[ToolCall]) -> GenerationResponse:
    return GenerationResponse(
        Message(role="assistant", content=content, tool_calls=tuple(calls)),
        "tool_call",
    )


# --- remote client -----------------------------------------------------------


@dataclass
class RemoteConfig:
    endpoint: str
    model: str
    api_key_env: str = ""
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_base_s: float = 0.25


class RemoteClient:
    """OpenAI-compatible chat client with bounded retries.

    Transient failures (timeouts, connection errors, 5xx) are retried up to
    max_retries times with exponential backoff; exhaustion surfaces as
    GatewayTimeout. Thread-safe: httpx pools connections internally.
    """

    def __init__(self, config: RemoteConfig) -> None:
        import httpx

        self.config = config
        headers = {}
        key = os.environ.get(config.api_key_env, "") if config.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=config.timeout_s, headers=headers)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        import httpx

        body = {
            "model": self.config.model,
            "messages": [self._wire_message(m) for m in request.messages],
            "temperature": request.sampling.temperature,
        }
        if request.available_tools:
            body["tools"] = [
                {"type": "function", "function": schema} for schema in request.available_tools
            ]
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            try:
                reply = self._http.post(self.config.endpoint, json=body)
                if reply.status_code >= 500:
                    raise httpx.HTTPStatusError(
                        f"server error {reply.status_code}", request=reply.request, response=reply
                    )
                reply.raise_for_status()
                response = self._parse_completion(reply.json())
                _check_response(request, response)
                return _apply_truncation(request, response)
            except (httpx.TimeoutException, httpx.ConnectError, httpx.HTTPStatusError) as exc:
                if isinstance(exc, httpx.HTTPStatusError) and exc.response.status_code < 500:
                    raise GatewayError(f"endpoint rejected request: {exc}") from exc
                last_error = exc
                if attempt < self.config.max_retries:
                    time.sleep(self.config.backoff_base_s * (2**attempt))
        raise GatewayTimeout(f"remote generation failed after retries: {last_error}")

    @staticmethod
    def _wire_message(m: Message) -> dict:
        wire: dict[str, Any] = {"role": m.role, "content": m.content}
        if m.tool_calls:
            wire["tool_calls"] = [
                {
                    "id": c.id,
                    "type": "function",
                    "function": {"name": c.name, "arguments": c.arguments_json()},
                }
                for c in m.tool_calls
            ]
        if m.tool_call_id:
            wire["tool_call_id"] = m.tool_call_id
        return wire

    @staticmethod
    def _parse_completion(payload: dict) -> GenerationResponse:
        choice = payload["choices"][0]
        raw = choice["message"]
        calls = []
        for c in raw.get("tool_calls") or []:
            fn = c.get("function", {})
            try:
                args = json.loads(fn.get("arguments") or "{}")
            except json.JSONDecodeError as exc:
                raise MalformedToolCall(f"unparseable arguments for {fn.get('name')!r}") from exc
            if not isinstance(args, dict):
                raise MalformedToolCall(f"arguments for {fn.get('name')!r} are not an object")
            calls.append(ToolCall(id=c.get("id", ""), name=fn.get("name", ""), arguments=args))
        finish = choice.get("finish_reason", "stop")
        reason = {"tool_calls": "tool_call", "length": "length"}.get(finish, "stop")
        if calls and reason == "stop":
            reason = "tool_call"
        message = Message(role="assistant", content=raw.get("content") or "", tool_calls=tuple(calls))
        return GenerationResponse(message=message, finish_reason=reason)
