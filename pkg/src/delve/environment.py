"""The interaction loop: one agent, one task, tools, plugins, reward.

The Environment owns the loop. Each step it assembles the live view (system
prompt, user prompt, everything after the last compression boundary), lets
plugins reshape it, asks the agent to decide, executes tool calls through the
plugin gate, and gives plugins a chance to terminate. The reward is evaluated
exactly once, when the rollout finishes; truncated rollouts default to 0.

A Dispatcher fans prompts out to a strategy under a bounded thread pool.
Rollouts share no mutable state, so the same scripted client produces
byte-identical records at any concurrency level.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Protocol, Sequence

from .core import (
    Message,
    Rollout,
    TaskSpec,
    ToolCall,
    context_char_count,
    extract_answer_from_text,
    live_window,
)
from .gateway import (
    Client,
    GatewayError,
    GenerationRequest,
    GenerationResponse,
    MalformedToolCall,
    Sampling,
    ScriptMiss,
)
from .retrieval import ToolExecutionError


class ToolExecutor(Protocol):
    name: str

    def schema(self) -> dict: ...

    def execute(self, arguments: dict) -> str: ...


# --- plugin contract ---------------------------------------------------------


@dataclass(frozen=True)
class ToolDecision:
    action: str  # "allow" | "rewrite" | "deny"
    call: ToolCall | None = None
    reason: str | None = None

    @classmethod
    def allow(cls) -> "ToolDecision":
        return cls("allow")

    @classmethod
    def rewrite(cls, call: ToolCall) -> "ToolDecision":
        return cls("rewrite", call=call)

    @classmethod
    def deny(cls, reason: str) -> "ToolDecision":
        return cls("deny", reason=reason)


@dataclass(frozen=True)
class StepDecision:
    action: str  # "continue" | "terminate"
    reason: str | None = None

    @classmethod
    def proceed(cls) -> "StepDecision":
        return cls("continue")

    @classmethod
    def terminate(cls, reason: str) -> "StepDecision":
        return cls("terminate", reason=reason)


class LifecyclePlugin:
    """Intercepts fixed points of the loop. Hooks may mutate only the rollout
    being built (recording boundaries, events); everything else is pure."""

    def before_agent_step(self, rollout: Rollout, view: list[Message]) -> list[Message]:
        return view

    def on_tool_call(self, rollout: Rollout, call: ToolCall) -> ToolDecision:
        return ToolDecision.allow()

    def on_step_end(self, rollout: Rollout) -> StepDecision:
        return StepDecision.proceed()


# --- agent -------------------------------------------------------------------


class Agent(Protocol):
    def decide(self, view: Sequence[Message], tools: Sequence[dict]) -> GenerationResponse: ...


class GatewayAgent:
    """Single LLM call per step, through a gateway client.

    variant_tag, when set, appends a transient user marker to the request
    (never to the rollout) so deterministic clients can serve distinct
    responses for sibling samples of one prompt. Live sampling backends leave
    it unset and rely on temperature.
    """

    def __init__(self, client: Client, sampling: Sampling = Sampling(), variant_tag: str | None = None) -> None:
        self.client = client
        self.sampling = sampling
        self.variant_tag = variant_tag

    def decide(self, view: Sequence[Message], tools: Sequence[dict]) -> GenerationResponse:
        messages = list(view)
        if self.variant_tag:
            messages.append(Message(role="user", content=f"(sample {self.variant_tag})"))
        request = GenerationRequest(
            messages=tuple(messages), available_tools=tuple(tools), sampling=self.sampling
        )
        return self.client.generate(request)


DecideFn = Callable[[Rollout, list[Message], list[dict]], GenerationResponse]
RewardEvaluator = Callable[[Rollout], float]


@dataclass
class Environment:
    task: TaskSpec
    tools: dict[str, ToolExecutor] = field(default_factory=dict)
    reward_evaluator: RewardEvaluator | None = None
    plugins: list[LifecyclePlugin] = field(default_factory=list)
    result_sink: Callable[[Rollout], None] | None = None
    system_prompt: str = ""
    score_truncated: bool = False
    malformed_retries: int = 1

    def tool_schemas(self) -> list[dict]:
        return [tool.schema() for tool in self.tools.values()]


def execute_tool(registry: dict[str, ToolExecutor], call: ToolCall) -> ToolCall:
    """Run one call; failures land in the output text, never raise."""
    tool = registry.get(call.name)
    if tool is None:
        return call.with_output(f"error: unknown tool {call.name!r}")
    try:
        return call.with_output(tool.execute(call.arguments))
    except ToolExecutionError as exc:
        return call.with_output(f"error: {exc}")


def build_view(env: Environment, rollout: Rollout) -> list[Message]:
    return [
        Message(role="system", content=env.system_prompt),
        Message(role="user", content=rollout.prompt),
    ] + live_window(rollout)


def run_rollout(
    env: Environment,
    agent: Agent,
    prompt: str,
    rollout_id: str | None = None,
    decide_fn: DecideFn | None = None,
) -> Rollout:
    """Drive one full interaction and return the finished record.

    decide_fn replaces the plain one-call-per-step agent decision when a
    strategy needs to branch (value-guided search); the default delegates to
    agent.decide on the plugin-shaped view.
    """
    if not prompt:
        raise ValueError("prompt must be nonempty")
    rollout = Rollout(
        task_id=rollout_id or env.task.task_id,
        prompt=prompt,
        system_prompt=env.system_prompt,
    )
    tools = env.tool_schemas()
    if decide_fn is None:
        decide_fn = lambda r, view, t: agent.decide(view, t)  # noqa: E731

    malformed_left = env.malformed_retries
    while True:
        view = build_view(env, rollout)
        for plugin in env.plugins:
            view = plugin.before_agent_step(rollout, view)

        try:
            response = decide_fn(rollout, view, tools)
        except MalformedToolCall as exc:
            rollout.steps.append(
                Message(role="assistant", content=f"[error] malformed tool call: {exc}")
            )
            rollout.char_count_history.append(context_char_count(rollout))
            if malformed_left > 0:
                malformed_left -= 1
                if rollout.step_count < env.task.max_steps:
                    continue
            rollout.truncated = True
            rollout.termination_reason = "malformed_tool_call"
            break
        except ScriptMiss:
            raise
        except GatewayError as exc:
            rollout.truncated = True
            rollout.termination_reason = f"gateway_failure: {exc}"
            break

        rollout.steps.append(response.message)

        if response.finish_reason == "length":
            # output hit the char cap on what would have been the answer step
            rollout.truncated = True
            rollout.termination_reason = "length"
            rollout.char_count_history.append(context_char_count(rollout))
            break

        if response.message.tool_calls:
            for call in response.message.tool_calls:
                decision = ToolDecision.allow()
                effective = call
                for plugin in env.plugins:
                    decision = plugin.on_tool_call(rollout, effective)
                    if decision.action == "rewrite" and decision.call is not None:
                        effective = decision.call
                    elif decision.action == "deny":
                        break
                if decision.action == "deny":
                    output = f"denied: {decision.reason}"
                else:
                    effective = execute_tool(env.tools, effective)
                    output = effective.output or ""
                rollout.steps.append(
                    Message(role="tool", content=output, tool_call_id=call.id)
                )
        else:
            answer = extract_answer_from_text(response.message.content)
            if answer is not None:
                rollout.final_answer = answer

        rollout.char_count_history.append(context_char_count(rollout))

        stop_reason = None
        for plugin in env.plugins:
            decision = plugin.on_step_end(rollout)
            if decision.action == "terminate":
                stop_reason = decision.reason or "plugin"
                break
        if stop_reason is not None:
            if rollout.final_answer is None:
                rollout.truncated = True
            rollout.termination_reason = stop_reason
            break
        if rollout.final_answer is not None:
            rollout.termination_reason = "answered"
            break
        if rollout.step_count >= env.task.max_steps:
            rollout.truncated = True
            rollout.termination_reason = "budget"
            break

    if rollout.reward is None:
        if rollout.truncated and not env.score_truncated:
            rollout.reward = 0.0 if env.reward_evaluator is not None else None
        elif env.reward_evaluator is not None:
            rollout.reward = float(env.reward_evaluator(rollout))
    rollout.validate()
    if env.result_sink is not None:
        env.result_sink(rollout)
    return rollout


# --- strategies and the dispatcher ------------------------------------------

EnvFactory = Callable[[], Environment]
AgentFactory = Callable[[], Agent]


class ExplorationStrategy(Protocol):
    """Maps one prompt to one or more finished rollouts."""

    def rollouts_for_prompt(
        self,
        prompt_id: str,
        prompt: str,
        env_factory: EnvFactory,
        agent_factory: AgentFactory,
    ) -> list[Rollout]: ...


class SimpleStrategy:
    """One environment-agent pair, one rollout per prompt."""

    def rollouts_for_prompt(
        self,
        prompt_id: str,
        prompt: str,
        env_factory: EnvFactory,
        agent_factory: AgentFactory,
    ) -> list[Rollout]:
        return [run_rollout(env_factory(), agent_factory(), prompt, rollout_id=prompt_id)]


class GroupStrategy:
    """G independent rollouts per prompt, for group-based training data.

    Member m > 0 runs with variant tag "g<m>" so scripted clients can vary
    responses within the group; member 0 is the unmarked baseline.
    """

    def __init__(self, group_size: int) -> None:
        if group_size < 1:
            raise ValueError("group_size must be >= 1")
        self.group_size = group_size

    def rollouts_for_prompt(
        self,
        prompt_id: str,
        prompt: str,
        env_factory: EnvFactory,
        agent_factory: AgentFactory,
    ) -> list[Rollout]:
        out = []
        for m in range(self.group_size):
            agent = agent_factory()
            if m > 0 and isinstance(agent, GatewayAgent):
                agent = GatewayAgent(agent.client, agent.sampling, variant_tag=f"g{m}")
            out.append(
                run_rollout(
                    env_factory(), agent, prompt, rollout_id=f"{prompt_id}/g{m}"
                )
            )
        return out


class Dispatcher:
    """Bounded-concurrency fan-out of prompts to a strategy.

    Yields rollouts as prompts finish; completion order is not input order.
    Each rollout is tagged with its prompt id by the strategy.
    """

    def __init__(self, concurrency_limit: int = 1) -> None:
        if concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")
        self.concurrency_limit = concurrency_limit

    def run(
        self,
        strategy: ExplorationStrategy,
        prompts: Iterable[tuple[str, str]],
        env_factory: EnvFactory,
        agent_factory: AgentFactory,
    ) -> Iterator[Rollout]:
        prompt_list = list(prompts)
        if self.concurrency_limit == 1:
            for pid, text in prompt_list:
                yield from strategy.rollouts_for_prompt(pid, text, env_factory, agent_factory)
            return
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.concurrency_limit) as pool:
            futures = [
                pool.submit(strategy.rollouts_for_prompt, pid, text, env_factory, agent_factory)
                for pid, text in prompt_list
            ]
            for done in concurrent.futures.as_completed(futures):
                yield from done.result()
