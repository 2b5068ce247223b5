"""Test-time-compute strategies over the rollout harness.

Two ways to spend extra inference compute on one question:

* parallel thinking: N independent rollouts, then one aggregation rollout
  whose user message lists the N short answers (never the full trajectories);
  the aggregator keeps tool access by default so it can adjudicate.
* value-guided search: breadth-first per-step branching. At every assistant
  step the client proposes k candidate continuations, a value model scores
  each full text prefix, and the argmax branch survives (ties keep the first
  candidate). Independent trees are combined by MV / WMV / BoN voting.

Sibling samples of the same context are distinguished by a transient
"(sample ...)" user marker appended to the generation request only, never to
the rollout; candidate 0 / tree 0 carry no marker, so the degenerate cases
(N=1, k=1) are byte-identical to a plain rollout.

The module also builds value-model training targets (character-masked text
with a binary outcome) and evaluates the per-position cross-entropy loss, so
an external trainer has everything it needs.
"""

from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .core import (
    ANSWER_MARKER,
    DelveError,
    Message,
    Rendered,
    Rollout,
    extract_final_answer,
    render_messages,
)
from .environment import EnvFactory, GatewayAgent, run_rollout
from .gateway import Client, GatewayError, GenerationRequest, GenerationResponse, Sampling, ScriptMiss
from .rewards import normalize_answer
from .templates import fill, load_template


class TtcError(DelveError):
    pass


class AllRolloutsFailed(TtcError):
    """No candidate rollout produced an extractable answer.

    parallel_think raises this only in strict mode; by default the
    aggregation proceeds with an explicit empty-candidate note, since the
    aggregator still has tools and may recover on its own.
    """


class NoAnswers(TtcError):
    pass


class NonBinaryReward(TtcError):
    pass


class AlignmentMismatch(TtcError):
    pass


# --- shared helpers -----------------------------------------------------------


def render_prefix(rollout: Rollout, extra: Sequence[Message] = ()) -> Rendered:
    """Canonical text of the conversation so far (plus tentative messages).

    This is the exact string a value model scores and the exact string value
    training examples are built from, so train and inference inputs agree.
    """
    messages = [
        Message(role="system", content=rollout.system_prompt),
        Message(role="user", content=rollout.prompt),
    ]
    messages.extend(rollout.steps)
    messages.extend(extra)
    return render_messages(messages)


def _variant_marker(tag: str) -> Message:
    return Message(role="user", content=f"(sample {tag})")


# --- parallel thinking ---------------------------------------------------------


@dataclass(frozen=True)
class ParallelThinkingConfig:
    n_rollouts: int
    aggregator_template: str = field(default_factory=lambda: load_template("aggregator.txt"))
    aggregator_tools_enabled: bool = True

    def __post_init__(self) -> None:
        if self.n_rollouts < 1:
            raise ValueError("n_rollouts must be >= 1")
        if "{question}" not in self.aggregator_template or "{candidate_answers}" not in self.aggregator_template:
            raise ValueError("aggregator template needs {question} and {candidate_answers}")


def format_candidate_answers(answers: Sequence[str]) -> str:
    if not answers:
        return "(no candidate answers were produced)"
    return "\n".join(f"{i + 1}. {a}" for i, a in enumerate(answers))


def parallel_think(
    prompt: str,
    config: ParallelThinkingConfig,
    env_factory: EnvFactory,
    client: Client,
    sampling: Sampling = Sampling(),
    prompt_id: str = "task",
    concurrency: int = 1,
    strict: bool = False,
) -> Rollout:
    """Run N independent rollouts, then one aggregation rollout over their
    short answers. Returns the aggregation rollout; every rollout (N+1 of
    them) reaches the environments' result sink."""

    def one_candidate(i: int) -> Rollout:
        tag = f"p{i}" if i > 0 else None
        agent = GatewayAgent(client, sampling, variant_tag=tag)
        return run_rollout(env_factory(), agent, prompt, rollout_id=f"{prompt_id}/cand{i}")

    n = config.n_rollouts
    if concurrency > 1 and n > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=min(concurrency, n)) as pool:
            candidates = list(pool.map(one_candidate, range(n)))
    else:
        candidates = [one_candidate(i) for i in range(n)]

    answers = [r.final_answer for r in candidates if r.final_answer is not None]
    if not answers and strict:
        raise AllRolloutsFailed(f"none of {n} rollouts produced an answer")

    agg_prompt = fill(
        config.aggregator_template,
        {"question": prompt, "candidate_answers": format_candidate_answers(answers)},
    )
    agg_env = env_factory()
    if not config.aggregator_tools_enabled:
        agg_env.tools = {}
    agg_agent = GatewayAgent(client, sampling)
    return run_rollout(agg_env, agg_agent, agg_prompt, rollout_id=f"{prompt_id}/agg")


# --- value models ---------------------------------------------------------------


class ValueModel(Protocol):
    """Maps (prompt, partial rollout text) to success probability in (0,1).

    Must be deterministic for fixed inputs; search ordering depends on it.
    """

    def score(self, prompt: str, partial_rollout_text: str) -> float: ...


class ScriptedValueModel:
    """Lookup table keyed by substring of the partial text.

    The longest matching key wins; no match falls back to the default. Keeps
    search tests exact without training anything.
    """

    def __init__(self, table: dict[str, float] | None = None, default: float = 0.5) -> None:
        self.table = dict(table or {})
        for key, value in self.table.items():
            if not 0.0 < value < 1.0:
                raise ValueError(f"value for key {key!r} outside (0,1): {value}")
        if not 0.0 < default < 1.0:
            raise ValueError(f"default outside (0,1): {default}")
        self.default = default

    def score(self, prompt: str, partial_rollout_text: str) -> float:
        best_key = None
        for key in self.table:
            if key in partial_rollout_text:
                if best_key is None or len(key) > len(best_key):
                    best_key = key
        return self.table[best_key] if best_key is not None else self.default


@dataclass(frozen=True)
class LogisticValueModel:
    """Logistic over three cheap text features: answer marker present,
    saturating length, tool-call count. A stand-in for a trained value net
    with the same calling convention."""

    weights: tuple[float, float, float] = (2.0, 0.5, 0.1)
    bias: float = -1.0

    def score(self, prompt: str, partial_rollout_text: str) -> float:
        feats = (
            1.0 if ANSWER_MARKER in partial_rollout_text else 0.0,
            min(len(partial_rollout_text) / 10_000.0, 1.0),
            float(partial_rollout_text.count("[tool_call ")),
        )
        z = self.bias + sum(w * f for w, f in zip(self.weights, feats))
        return 1.0 / (1.0 + math.exp(-z))


# --- value-guided search ---------------------------------------------------------

AGGREGATION_METHODS = ("mv", "wmv", "bon")


@dataclass(frozen=True)
class VgsConfig:
    k_candidates: int = 2
    n_trees: int = 1
    aggregation: str = "mv"

    def __post_init__(self) -> None:
        if self.k_candidates < 1:
            raise ValueError("k_candidates must be >= 1")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.aggregation not in AGGREGATION_METHODS:
            raise ValueError(f"aggregation must be one of {AGGREGATION_METHODS}")


def vgs_rollout(
    prompt: str,
    config: VgsConfig,
    value_model: ValueModel,
    env_factory: EnvFactory,
    client: Client,
    sampling: Sampling = Sampling(),
    rollout_id: str | None = None,
    tree_index: int = 0,
) -> Rollout:
    """One search tree: k candidates per assistant step, argmax survives."""
    k = config.k_candidates
    env = env_factory()

    def decide(rollout: Rollout, view: list[Message], tools: list[dict]) -> GenerationResponse:
        best: GenerationResponse | None = None
        best_score = -math.inf
        failures: list[GatewayError] = []
        for j in range(k):
            tag = ""
            if tree_index > 0:
                tag += f"t{tree_index}"
            if j > 0:
                tag += f"b{j}"
            messages = list(view)
            if tag:
                messages.append(_variant_marker(tag))
            request = GenerationRequest(
                messages=tuple(messages), available_tools=tuple(tools), sampling=sampling
            )
            try:
                response = client.generate(request)
            except ScriptMiss:
                raise
            except GatewayError as exc:
                failures.append(exc)
                continue
            prefix = render_prefix(rollout, [response.message]).text
            score = value_model.score(rollout.prompt, prefix)
            if best is None or score > best_score:
                best = response
                best_score = score
        if best is None:
            raise GatewayError(f"all {k} candidates failed: {failures[-1] if failures else 'no candidates'}")
        return best

    agent = GatewayAgent(client, sampling)
    return run_rollout(env, agent, prompt, rollout_id=rollout_id, decide_fn=decide)


@dataclass
class VgsOutcome:
    answer: str
    tree_rollouts: list[Rollout]
    method: str


def vgs_search(
    prompt: str,
    config: VgsConfig,
    value_model: ValueModel,
    env_factory: EnvFactory,
    client: Client,
    sampling: Sampling = Sampling(),
    prompt_id: str = "task",
    concurrency: int = 1,
) -> VgsOutcome:
    """N independent trees, one final answer by the configured vote."""

    def one_tree(t: int) -> Rollout:
        return vgs_rollout(
            prompt,
            config,
            value_model,
            env_factory,
            client,
            sampling,
            rollout_id=f"{prompt_id}/tree{t}",
            tree_index=t,
        )

    n = config.n_trees
    if concurrency > 1 and n > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=min(concurrency, n)) as pool:
            trees = list(pool.map(one_tree, range(n)))
    else:
        trees = [one_tree(t) for t in range(n)]
    answer = aggregate(trees, config.aggregation, value_model)
    return VgsOutcome(answer=answer, tree_rollouts=trees, method=config.aggregation)


# --- answer aggregation -----------------------------------------------------------


def _rollout_value(rollout: Rollout, value_model: ValueModel) -> float:
    return value_model.score(rollout.prompt, render_prefix(rollout).text)


def aggregate(
    rollouts: Sequence[Rollout],
    method: str,
    value_model: ValueModel | None = None,
) -> str:
    """Pick one final answer from many rollouts.

    MV: modal normalized-answer class. WMV: class with the largest summed
    value weight. BoN: answer of the single highest-value rollout. All ties
    resolve toward the earliest rollout. Returns the verbatim answer of the
    earliest rollout in the winning class.
    """
    method = method.lower()
    if method not in AGGREGATION_METHODS:
        raise ValueError(f"method must be one of {AGGREGATION_METHODS}")
    answered: list[tuple[int, Rollout, str]] = []
    for i, r in enumerate(rollouts):
        answer = r.final_answer if r.final_answer is not None else extract_final_answer(r)
        if answer is not None:
            answered.append((i, r, answer))
    if not answered:
        raise NoAnswers("no rollout carries an extractable answer")
    if method in ("wmv", "bon") and value_model is None:
        raise ValueError(f"{method} requires a value model")
    if method == "bon":
        assert value_model is not None
        _, _, best_answer = answered[0]
        best_v = _rollout_value(answered[0][1], value_model)
        for i, r, answer in answered[1:]:
            v = _rollout_value(r, value_model)
            if v > best_v:
                best_v, best_answer = v, answer
        return best_answer

    # class order = first appearance, which encodes the tie rule
    classes: dict[str, list[tuple[int, str]]] = {}
    rollout_by_index = {i: r for i, r, _ in answered}
    for i, r, answer in answered:
        classes.setdefault(normalize_answer(answer), []).append((i, answer))
    weights: dict[str, float] = {}
    for key, members in classes.items():
        if method == "mv":
            weights[key] = float(len(members))
        else:
            assert value_model is not None
            weights[key] = sum(
                _rollout_value(rollout_by_index[i], value_model) for i, _ in members
            )
    best_key = None
    best_w = -math.inf
    for key in classes:  # first-appearance order
        if weights[key] > best_w:
            best_key, best_w = key, weights[key]
    assert best_key is not None
    return classes[best_key][0][1]


# --- value-model training targets ---------------------------------------------------


@dataclass(frozen=True)
class ValueTrainingExample:
    prompt: str
    text: str
    mask_spans: tuple[tuple[int, int], ...]
    reward: int

    def to_record(self) -> dict:
        return {
            "prompt": self.prompt,
            "text": self.text,
            "mask_spans": [list(s) for s in self.mask_spans],
            "reward": self.reward,
        }

    @classmethod
    def from_record(cls, data: dict) -> "ValueTrainingExample":
        return cls(
            prompt=data["prompt"],
            text=data["text"],
            mask_spans=tuple((int(a), int(b)) for a, b in data["mask_spans"]),
            reward=int(data["reward"]),
        )

    def masked_char_count(self) -> int:
        return sum(b - a for a, b in self.mask_spans)


def build_value_examples(rollouts: Sequence[Rollout]) -> list[ValueTrainingExample]:
    """One training example per rollout; mask covers policy text only, so the
    prompt frame and every tool output stay unmasked."""
    out = []
    for r in rollouts:
        if r.reward is None or r.reward not in (0.0, 1.0):
            raise NonBinaryReward(f"rollout {r.task_id!r} reward {r.reward!r} is not binary")
        rendered = render_prefix(r)
        out.append(
            ValueTrainingExample(
                prompt=r.prompt,
                text=rendered.text,
                mask_spans=rendered.policy_spans,
                reward=int(r.reward),
            )
        )
    return out


def value_ce_loss(predictions: Sequence[float], example: ValueTrainingExample) -> float:
    """Cross-entropy against the rollout outcome, summed over masked positions.

    predictions holds one success probability per character of example.text;
    only masked (policy-generated) positions contribute.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim != 1 or preds.shape[0] != len(example.text):
        raise AlignmentMismatch(
            f"{preds.shape[0] if preds.ndim == 1 else preds.shape} predictions for "
            f"{len(example.text)} characters"
        )
    mask = np.zeros(len(example.text), dtype=bool)
    for a, b in example.mask_spans:
        mask[a:b] = True
    p = preds[mask]
    if p.size == 0:
        return 0.0
    if not ((p > 0.0) & (p < 1.0)).all():
        raise ValueError("predictions must lie strictly inside (0,1)")
    r = float(example.reward)
    return float(-(r * np.log(p) + (1.0 - r) * np.log1p(-p)).sum())
