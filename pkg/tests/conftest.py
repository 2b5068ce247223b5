"""Shared fixtures: a mini corpus, deterministic index building, and the
record/replay machinery that turns planned response sequences into
fingerprint-keyed scripts.

Scripting strategy used throughout: run the flow once against a
SequenceClient (pops planned responses in order, remembering which request
fingerprint consumed each one), then build a ScriptedClient from the
recording and run again. The second run must be byte-identical, and it
exercises the same client the offline CLI uses.
"""

import json

import pytest

from delve.core import Message, Rollout, TaskSpec, ToolCall
from delve.environment import Environment, GatewayAgent, run_rollout
from delve.gateway import (
    GenerationResponse,
    Sampling,
    ScriptedClient,
    request_fingerprint,
    text_response,
    tool_call_response,
)
from delve.retrieval import (
    TOOL_NAME,
    Chunk,
    HashEmbedder,
    SearchTool,
    build_index,
    token_estimate,
)


class SequenceClient:
    """Answers generate() calls from a fixed plan, in order, recording the
    fingerprint each response ended up answering."""

    def __init__(self, responses):
        self.queue = list(responses)
        self.seen = []
        self.requests = []

    def generate(self, request):
        if not self.queue:
            raise AssertionError(
                f"response plan exhausted; unplanned request ending with "
                f"{request.messages[-1].content[:120]!r}"
            )
        response = self.queue.pop(0)
        self.requests.append(request)
        self.seen.append((request_fingerprint(request), response))
        return response

    def to_scripted(self):
        script = {}
        for fp, response in self.seen:
            if fp in script and script[fp] is not response:
                raise AssertionError(
                    "one fingerprint consumed two different responses; "
                    "the flow needs variant markers to be replayable"
                )
            script[fp] = response
        return ScriptedClient(script)


def record_and_replay(responses, run):
    """Run `run(client)` twice: once recording, once replaying.

    Returns (first_result, second_result, scripted_client). Asserting the two
    results equal is the caller's job; they were produced by different client
    implementations over identical request streams.
    """
    recorder = SequenceClient(responses)
    first = run(recorder)
    assert not recorder.queue, f"{len(recorder.queue)} planned responses never used"
    scripted = recorder.to_scripted()
    second = run(scripted)
    return first, second, scripted


# --- canned message builders ---------------------------------------------------------


def search_call(query, call_id="c1"):
    return ToolCall(id=call_id, name=TOOL_NAME, arguments={"query": query})


def search_step(query, call_id="c1", content=""):
    return tool_call_response(content, [search_call(query, call_id)])


def answer_text(answer, confidence=None, preamble=""):
    text = f"{preamble}Exact Answer: {answer}"
    if confidence is not None:
        text += f"\nConfidence: {confidence}%"
    return text


def answer_step(answer, confidence=None, preamble=""):
    return text_response(answer_text(answer, confidence, preamble))


def assistant_msg(content, calls=()):
    return Message(role="assistant", content=content, tool_calls=tuple(calls))


def tool_msg(content, call_id="c1"):
    return Message(role="tool", content=content, tool_call_id=call_id)


def user_msg(content):
    return Message(role="user", content=content)


def make_rollout(task_id="t", prompt="q", steps=(), boundaries=(), **kwargs):
    return Rollout(
        task_id=task_id,
        prompt=prompt,
        steps=list(steps),
        compression_boundaries=list(boundaries),
        **kwargs,
    )


# --- corpus and index fixtures ---------------------------------------------------------


MINI_DOCS = [
    {"doc_id": "d1", "text": "The Freddie Stories is a graphic novel by Lynda Barry."},
    {"doc_id": "d2", "text": "Sasquatch Books is a publisher founded in 1986 in Seattle."},
    {"doc_id": "d3", "text": "Fran Manushkin wrote the picture book Baby in 1972."},
    {"doc_id": "d4", "text": "Willis Tower in Chicago is among the tallest US buildings."},
    {"doc_id": "d5", "text": "Siku Njema is an epic Swahili novel by Ken Walibora."},
]


def mini_chunks(docs=None):
    docs = MINI_DOCS if docs is None else docs
    return [
        Chunk(d["doc_id"], f"{d['doc_id']}#0", d["text"], token_estimate(d["text"]))
        for d in docs
    ]


@pytest.fixture(scope="session")
def mini_index():
    provider = HashEmbedder(dimension=64, seed=0)
    return build_index(mini_chunks(), provider), provider


def make_env(index, provider, k=3, max_steps=20, plugins=None, system_prompt="", **kwargs):
    task = TaskSpec(task_id="fixture", retrieval_k=k, max_steps=max_steps)
    return Environment(
        task=task,
        tools={TOOL_NAME: SearchTool(index, provider, k)},
        plugins=list(plugins or []),
        system_prompt=system_prompt,
        **kwargs,
    )


def run_plan(index, provider, responses, prompt="q", rollout_id=None, **env_kwargs):
    """One rollout driven by a planned response sequence."""
    client = SequenceClient(responses)
    env = make_env(index, provider, **env_kwargs)
    rollout = run_rollout(env, GatewayAgent(client, Sampling()), prompt, rollout_id=rollout_id)
    assert not client.queue, "rollout ended with planned responses unused"
    return rollout


def rollout_records_equal(a, b):
    return json.dumps(a.to_record(), sort_keys=True) == json.dumps(b.to_record(), sort_keys=True)
