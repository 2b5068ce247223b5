"""The three stock lifecycle plugins: context compression, step budgeting,
tool gating.

Compression is the interesting one. When the live view grows past the
threshold it sends the history (everything after the system and user
messages, standing summary included) back through the same model client with
the compression template, then replaces the view with [system, user prompt,
summary]. The summary is appended to the rollout as an assistant message and
its index recorded as a compression boundary; training-data splitting relies
on exactly this bookkeeping. The compression call is not charged against the
step budget.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import Message, Rollout, ToolCall, render_history
from .environment import LifecyclePlugin, StepDecision, ToolDecision
from .gateway import Client, GenerationRequest, Sampling

COMPRESSION_SYSTEM_PROMPT = "You compress agent interaction histories into short, factual summaries."


@dataclass(frozen=True)
class CompressionConfig:
    threshold_chars: int = 150_000
    summary_budget_chars: int = 4_000
    template: str = "Summarize the following interaction history, keeping every fact relevant to the task:\n\n{history}"

    def __post_init__(self) -> None:
        if self.summary_budget_chars >= self.threshold_chars:
            raise ValueError("summary budget must be below the trigger threshold")
        if "{history}" not in self.template:
            raise ValueError("compression template needs a {history} placeholder")


@dataclass(frozen=True)
class CompressionEvent:
    step_index: int
    pre_chars: int
    post_chars: int
    summary_text: str
    budget_truncated: bool = False

    def __post_init__(self) -> None:
        if self.post_chars >= self.pre_chars:
            raise ValueError("compression must shrink the history")


class CompressionPlugin(LifecyclePlugin):
    """Replace accumulated history with a model-written summary.

    Fires iff the view's character count strictly exceeds the threshold
    (equality never triggers). The system and user prompt are never
    compressed away. Summaries overrunning the budget are hard-truncated and
    the event flagged.
    """

    def __init__(self, config: CompressionConfig, client: Client, sampling: Sampling = Sampling()) -> None:
        self.config = config
        self.client = client
        self.sampling = sampling

    def before_agent_step(self, rollout: Rollout, view: list[Message]) -> list[Message]:
        total = sum(m.char_len() for m in view)
        if total <= self.config.threshold_chars:
            return view
        history = view[2:]
        if not history:
            return view
        rendered = render_history(history)
        request = GenerationRequest(
            messages=(
                Message(role="system", content=COMPRESSION_SYSTEM_PROMPT),
                Message(role="user", content=self.config.template.replace("{history}", rendered)),
            ),
            sampling=self.sampling,
        )
        summary = self.client.generate(request).message.content
        truncated = len(summary) > self.config.summary_budget_chars
        if truncated:
            summary = summary[: self.config.summary_budget_chars]
        summary_message = Message(role="assistant", content=summary)
        rollout.steps.append(summary_message)
        boundary = len(rollout.steps) - 1
        rollout.compression_boundaries.append(boundary)
        pre = sum(m.char_len() for m in history)
        event = CompressionEvent(
            step_index=boundary,
            pre_chars=pre,
            post_chars=len(summary),
            summary_text=summary,
            budget_truncated=truncated,
        )
        rollout.compression_events.append(event)
        return [view[0], view[1], summary_message]


class StepBudgetPlugin(LifecyclePlugin):
    """Terminate unanswered rollouts once the step budget is spent."""

    def __init__(self, max_steps: int) -> None:
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        self.max_steps = max_steps

    def on_step_end(self, rollout: Rollout) -> StepDecision:
        if rollout.final_answer is None and rollout.step_count >= self.max_steps:
            return StepDecision.terminate("budget")
        return StepDecision.proceed()


class ToolGatePlugin(LifecyclePlugin):
    """Allowlist gate over tool calls."""

    def __init__(self, allowlist: set[str] | frozenset[str]) -> None:
        self.allowlist = frozenset(allowlist)

    def on_tool_call(self, rollout: Rollout, call: ToolCall) -> ToolDecision:
        if call.name in self.allowlist:
            return ToolDecision.allow()
        return ToolDecision.deny(f"tool {call.name!r} is not on this task's allowlist")
