"""Shared domain types: messages, tool calls, rollouts, and answer parsing.

Everything downstream (harness, training-data builders, analytics) speaks in
these types. Messages and tool calls are immutable; a Rollout is built
incrementally by the harness and treated as frozen once finished.

Character counting is the only notion of context size in this package. There
is deliberately no tokenizer: thresholds, budgets, and mask spans are all
expressed in characters so that every test is exact and offline.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Iterator

ROLES = ("system", "assistant", "tool", "user")

ANSWER_MARKER = "Exact Answer:"
CONFIDENCE_MARKER = "Confidence:"


class DelveError(Exception):
    """Base class for package errors."""


@dataclass(frozen=True)
class ToolCall:
    """A tool invocation emitted by the model.

    output stays None until the environment executes the call; execution
    returns a new ToolCall rather than mutating this one.
    """

    id: str
    name: str
    arguments: dict[str, Any]
    output: str | None = None

    def with_output(self, text: str) -> "ToolCall":
        return replace(self, output=text)

    def arguments_json(self) -> str:
        return json.dumps(self.arguments, sort_keys=True, ensure_ascii=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "arguments": self.arguments,
            "output": self.output,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ToolCall":
        return cls(
            id=data["id"],
            name=data["name"],
            arguments=dict(data.get("arguments", {})),
            output=data.get("output"),
        )


@dataclass(frozen=True)
class Message:
    """One conversation message.

    Assistant messages may carry both content and tool_calls. Tool messages
    carry the output of exactly one originating call, referenced by
    tool_call_id.
    """

    role: str
    content: str
    tool_calls: tuple[ToolCall, ...] = ()
    tool_call_id: str | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "tool" and self.tool_call_id is None:
            raise ValueError("tool messages must reference their originating tool_call_id")

    def char_len(self) -> int:
        n = len(self.content)
        for call in self.tool_calls:
            n += len(call.name) + len(call.arguments_json())
        return n

    def to_dict(self) -> dict[str, Any]:
        return {
            "role": self.role,
            "content": self.content,
            "tool_calls": [c.to_dict() for c in self.tool_calls],
            "tool_call_id": self.tool_call_id,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Message":
        return cls(
            role=data["role"],
            content=data["content"],
            tool_calls=tuple(ToolCall.from_dict(c) for c in data.get("tool_calls", [])),
            tool_call_id=data.get("tool_call_id"),
        )


class RewardValue(float):
    """A reward in [0, 1]. Behaves as a float everywhere."""

    def __new__(cls, value: float) -> "RewardValue":
        v = float(value)
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"reward {v} outside [0, 1]")
        return super().__new__(cls, v)


@dataclass
class TaskSpec:
    """Static per-task configuration consumed by the harness."""

    task_id: str
    corpus_ref: str = ""
    retrieval_k: int = 5
    max_steps: int = 200
    compression_threshold_chars: int = 150_000
    reward_spec_ref: str = ""
    prompt_template_ref: str = ""

    def __post_init__(self) -> None:
        if not 1 <= self.retrieval_k <= 20:
            raise ValueError("retrieval_k must be in 1..20")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.compression_threshold_chars < 1:
            raise ValueError("compression_threshold_chars must be positive")


@dataclass
class Rollout:
    """The full record of one agent-task interaction.

    steps holds every generated message in order (assistant turns, tool
    outputs, and compression summaries). compression_boundaries are indices
    into steps pointing at the summary messages; an assistant message at a
    boundary index is a compression summary, not an agent step.
    """

    task_id: str
    prompt: str
    system_prompt: str = ""
    steps: list[Message] = field(default_factory=list)
    compression_boundaries: list[int] = field(default_factory=list)
    final_answer: str | None = None
    reward: float | None = None
    truncated: bool = False
    char_count_history: list[int] = field(default_factory=list)
    termination_reason: str | None = None
    compression_events: list[Any] = field(default_factory=list)

    @property
    def step_count(self) -> int:
        boundaries = set(self.compression_boundaries)
        return sum(
            1
            for i, m in enumerate(self.steps)
            if m.role == "assistant" and i not in boundaries
        )

    def assistant_step_indices(self) -> list[int]:
        boundaries = set(self.compression_boundaries)
        return [
            i
            for i, m in enumerate(self.steps)
            if m.role == "assistant" and i not in boundaries
        ]

    def validate(self) -> None:
        bounds = self.compression_boundaries
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError("compression_boundaries must be strictly increasing")
        if bounds and not (0 <= bounds[0] and bounds[-1] < len(self.steps)):
            raise ValueError("compression boundary outside step range")
        if self.truncated and self.final_answer is not None:
            raise ValueError("truncated rollouts cannot carry a final answer")
        if self.reward is not None and not 0.0 <= self.reward <= 1.0:
            raise ValueError("reward outside [0, 1]")

    def to_record(self) -> dict[str, Any]:
        """Serialize to the log-file schema. Field set is part of the format."""
        return {
            "task_id": self.task_id,
            "prompt": self.prompt,
            "steps": [m.to_dict() for m in self.steps],
            "compression_boundaries": list(self.compression_boundaries),
            "final_answer": self.final_answer,
            "reward": self.reward,
            "truncated": self.truncated,
        }

    @classmethod
    def from_record(cls, data: dict[str, Any]) -> "Rollout":
        return cls(
            task_id=data["task_id"],
            prompt=data["prompt"],
            steps=[Message.from_dict(m) for m in data["steps"]],
            compression_boundaries=list(data["compression_boundaries"]),
            final_answer=data.get("final_answer"),
            reward=data.get("reward"),
            truncated=bool(data.get("truncated", False)),
        )


def extract_final_answer(rollout: Rollout) -> str | None:
    """Pull the short answer out of the last assistant message.

    The solver prompt fixes the "Exact Answer:" marker (case-sensitive); the
    last occurrence wins so that in-message self-corrections are honored. A
    trailing "Confidence:" block is not part of the answer.
    """
    last = None
    for m in reversed(rollout.steps):
        if m.role == "assistant":
            last = m
            break
    if last is None:
        return None
    return extract_answer_from_text(last.content)


def extract_answer_from_text(text: str) -> str | None:
    idx = text.rfind(ANSWER_MARKER)
    if idx < 0:
        return None
    tail = text[idx + len(ANSWER_MARKER):]
    conf = tail.find(CONFIDENCE_MARKER)
    if conf >= 0:
        tail = tail[:conf]
    answer = tail.strip()
    return answer if answer else None


_CONFIDENCE_RE = re.compile(r"Confidence:\s*(\d{1,3})\s*%")


def parse_confidence(text: str) -> int | None:
    """Parse the solver's trailing confidence percentage, if any.

    Nothing downstream consumes this during scoring; the analytics module
    uses it for behavior features only.
    """
    hits = _CONFIDENCE_RE.findall(text)
    if not hits:
        return None
    value = int(hits[-1])
    return value if 0 <= value <= 100 else None


def context_char_count(rollout: Rollout) -> int:
    """Characters in the live context window.

    The window is the system prompt, the user prompt, and every step message
    at or after the last compression boundary (the standing summary sits at
    the boundary index itself).
    """
    start = rollout.compression_boundaries[-1] if rollout.compression_boundaries else 0
    n = len(rollout.system_prompt) + len(rollout.prompt)
    for m in rollout.steps[start:]:
        n += m.char_len()
    return n


def live_window(rollout: Rollout) -> list[Message]:
    """Messages currently visible to the agent, excluding system/user frame."""
    start = rollout.compression_boundaries[-1] if rollout.compression_boundaries else 0
    return list(rollout.steps[start:])


# --- canonical history rendering -------------------------------------------
#
# One renderer serves three consumers that must agree byte-for-byte: the
# compression plugin (what the summarizer sees), segment splitting (training
# pair contexts/completions), and value-model example construction. Span
# kinds: "frame" (labels, separators, user text), "policy" (model-generated
# text), "tool_output" (retrieved/tool text).

SEGMENT_SEPARATOR = "\n\n"


@dataclass(frozen=True)
class Rendered:
    text: str
    policy_spans: tuple[tuple[int, int], ...]
    tool_output_spans: tuple[tuple[int, int], ...]


def _message_parts(m: Message) -> list[tuple[str, str]]:
    if m.role == "assistant":
        parts = [("frame", "assistant: "), ("policy", m.content)]
        for call in m.tool_calls:
            parts.append(("frame", "\n[tool_call "))
            parts.append(("policy", f"{call.name}({call.arguments_json()})"))
            parts.append(("frame", "]"))
        return parts
    if m.role == "tool":
        return [("frame", "tool: "), ("tool_output", m.content)]
    return [("frame", f"{m.role}: "), ("frame", m.content)]


def render_messages(messages: Iterable[Message]) -> Rendered:
    pieces: list[str] = []
    policy: list[tuple[int, int]] = []
    tool_out: list[tuple[int, int]] = []
    pos = 0
    first = True
    for m in messages:
        if not first:
            pieces.append(SEGMENT_SEPARATOR)
            pos += len(SEGMENT_SEPARATOR)
        first = False
        for kind, text in _message_parts(m):
            if text:
                span = (pos, pos + len(text))
                if kind == "policy":
                    policy.append(span)
                elif kind == "tool_output":
                    tool_out.append(span)
                pieces.append(text)
                pos += len(text)
    return Rendered("".join(pieces), tuple(policy), tuple(tool_out))


def render_history(messages: Iterable[Message]) -> str:
    return render_messages(messages).text


# --- JSONL helpers ----------------------------------------------------------


def write_jsonl(path: str, records: Iterable[dict[str, Any]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    return n


def read_jsonl(path: str) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
