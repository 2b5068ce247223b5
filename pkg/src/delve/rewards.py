"""Completion scoring: nugget coverage, exact match, and the task registry.

A judge is a gateway client plus a prompt template; every parse keeps the raw
model output on the exception so misbehaving judges can be inspected. Exact
match gets a deterministic normalization fast path (casefold, strip
punctuation, collapse whitespace) so offline tests never need a judge at all.
"""

from __future__ import annotations

import ast
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import DelveError, Message, RewardValue, Rollout, extract_final_answer
from .gateway import Client, GenerationRequest, Sampling
from .templates import fill

SUPPORT = "support"
PARTIAL_SUPPORT = "partial_support"
NOT_SUPPORT = "not_support"
LABELS = (SUPPORT, PARTIAL_SUPPORT, NOT_SUPPORT)

JUDGE_SYSTEM_PROMPT = "You are a careful, literal-minded evaluation judge."


class RewardError(DelveError):
    pass


class JudgeParseFailure(RewardError):
    """Judge output did not match the expected format; raw output retained."""

    def __init__(self, message: str, raw_output: str) -> None:
        super().__init__(message)
        self.raw_output = raw_output


class UnregisteredTask(RewardError):
    pass


@dataclass(frozen=True)
class Judge:
    """One bound judge: a client and the template it answers through."""

    client: Client
    template: str
    sampling: Sampling = Sampling()

    def ask(self, mapping: dict[str, str]) -> str:
        request = GenerationRequest(
            messages=(
                Message(role="system", content=JUDGE_SYSTEM_PROMPT),
                Message(role="user", content=fill(self.template, mapping)),
            ),
            sampling=self.sampling,
        )
        return self.client.generate(request).message.content


@dataclass(frozen=True)
class NuggetSet:
    nuggets: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.nuggets:
            raise ValueError("a nugget set cannot be empty")
        if len(set(self.nuggets)) != len(self.nuggets):
            raise ValueError("duplicate nugget texts")

    def __len__(self) -> int:
        return len(self.nuggets)


@dataclass(frozen=True)
class NuggetVerdicts:
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        for label in self.labels:
            if label not in LABELS:
                raise ValueError(f"unknown verdict label {label!r}")


def normalize_answer(text: str) -> str:
    """Casefold, drop punctuation, collapse whitespace. Symmetric by construction."""
    folded = text.casefold()
    kept = "".join(
        " " if ch.isspace() else ch
        for ch in folded
        if not unicodedata.category(ch).startswith("P")
    )
    return " ".join(kept.split())


_LIST_RE = re.compile(r"\[[^\[\]]*\]", re.DOTALL)


def parse_label_list(raw: str, expected_count: int) -> NuggetVerdicts:
    matches = _LIST_RE.findall(raw)
    if not matches:
        raise JudgeParseFailure("no bracketed label list in judge output", raw)
    try:
        value = ast.literal_eval(matches[-1])
    except (ValueError, SyntaxError) as exc:
        raise JudgeParseFailure(f"label list not parseable: {exc}", raw) from exc
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise JudgeParseFailure("label list is not a list of strings", raw)
    if len(value) != expected_count:
        raise JudgeParseFailure(
            f"judge returned {len(value)} labels for {expected_count} nuggets", raw
        )
    for label in value:
        if label not in LABELS:
            raise JudgeParseFailure(f"unknown label {label!r}", raw)
    return NuggetVerdicts(tuple(value))


def judge_nuggets(question: str, answer: str, nuggets: NuggetSet, judge: Judge) -> NuggetVerdicts:
    raw = judge.ask(
        {
            "length": str(len(nuggets)),
            "question": question,
            "answer": answer,
            "nugget": _render_nugget_list(nuggets),
        }
    )
    return parse_label_list(raw, len(nuggets))


def _render_nugget_list(nuggets: NuggetSet) -> str:
    import json

    return json.dumps(list(nuggets.nuggets), ensure_ascii=False)


def score_nuggets(verdicts: NuggetVerdicts, partial_weight: float = 0.5) -> RewardValue:
    """Coverage score: (support + partial_weight * partial_support) / total."""
    if not verdicts.labels:
        raise ValueError("cannot score an empty verdict list")
    support = sum(1 for v in verdicts.labels if v == SUPPORT)
    partial = sum(1 for v in verdicts.labels if v == PARTIAL_SUPPORT)
    return RewardValue((support + partial_weight * partial) / len(verdicts.labels))


def parse_tagged(raw: str, tag: str) -> str:
    """Extract the last <tag>...</tag> payload, case-insensitively."""
    pattern = re.compile(rf"<{tag}>\s*(.*?)\s*</{tag}>", re.IGNORECASE | re.DOTALL)
    hits = pattern.findall(raw)
    if not hits:
        raise JudgeParseFailure(f"no <{tag}> tag in judge output", raw)
    return hits[-1].strip()


def parse_yes_no(raw: str, tag: str) -> bool:
    payload = parse_tagged(raw, tag).casefold().strip("[]. ")
    if payload == "yes":
        return True
    if payload == "no":
        return False
    raise JudgeParseFailure(f"<{tag}> payload is neither yes nor no: {payload!r}", raw)


def score_exact(
    final_answer: str,
    reference: str,
    judge: Judge | None = None,
    question: str = "",
) -> RewardValue:
    """Binary equality: normalized string match, else an optional judge call."""
    if not reference:
        raise ValueError("reference answer must be nonempty")
    if normalize_answer(final_answer) == normalize_answer(reference):
        return RewardValue(1.0)
    if judge is not None:
        raw = judge.ask({"question": question, "reference": reference, "candidate": final_answer})
        if parse_yes_no(raw, "equal"):
            return RewardValue(1.0)
    return RewardValue(0.0)


def nuggetize(question: str, reference: str, judge: Judge) -> NuggetSet:
    """Offline preprocessing: decompose a free-text reference into nuggets."""
    import json

    raw = judge.ask({"question": question, "reference": reference})
    matches = _LIST_RE.findall(raw)
    if not matches:
        raise JudgeParseFailure("no nugget list in judge output", raw)
    try:
        items = json.loads(matches[-1])
    except json.JSONDecodeError as exc:
        raise JudgeParseFailure(f"nugget list not parseable: {exc}", raw) from exc
    if not isinstance(items, list) or not all(isinstance(x, str) and x for x in items):
        raise JudgeParseFailure("nugget list is not a list of nonempty strings", raw)
    return NuggetSet(tuple(items))


KINDS = ("nugget", "exact_match", "single_nugget")


@dataclass(frozen=True)
class RewardSpec:
    """Per-task scoring configuration."""

    kind: str
    nuggets: NuggetSet | None = None
    answer: str | None = None
    judge: Judge | None = None
    partial_weight: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.kind == "nugget" and self.nuggets is None:
            raise ValueError("nugget rewards need a NuggetSet")
        if self.kind == "exact_match" and not self.answer:
            raise ValueError("exact_match rewards need a nonempty reference answer")
        if self.kind == "single_nugget" and not self.answer:
            raise ValueError("single_nugget rewards need a nugget text")

    def score(self, question: str, final_answer: str) -> RewardValue:
        if self.kind == "exact_match":
            assert self.answer is not None
            return score_exact(final_answer, self.answer, self.judge, question)
        if self.kind == "single_nugget":
            nuggets = NuggetSet((self.answer,))  # type: ignore[arg-type]
        else:
            assert self.nuggets is not None
            nuggets = self.nuggets
        if self.judge is None:
            raise RewardError("nugget scoring requires a judge binding")
        verdicts = judge_nuggets(question, final_answer, nuggets, self.judge)
        return score_nuggets(verdicts, self.partial_weight)


class RewardRegistry:
    """task_id -> RewardSpec dispatch, the multi-task composition point."""

    def __init__(self) -> None:
        self._specs: dict[str, RewardSpec] = {}

    def register(self, task_id: str, spec: RewardSpec) -> None:
        self._specs[task_id] = spec

    def spec_for(self, task_id: str) -> RewardSpec:
        try:
            return self._specs[task_id]
        except KeyError:
            raise UnregisteredTask(f"no reward spec registered for task {task_id!r}") from None

    def evaluate(self, task_id: str, rollout: Rollout) -> RewardValue:
        spec = self.spec_for(task_id)
        answer = rollout.final_answer
        if answer is None:
            answer = extract_final_answer(rollout)
        if answer is None:
            return RewardValue(0.0)
        return spec.score(rollout.prompt, answer)


def spec_from_config(config: dict, judge: Judge | None = None) -> RewardSpec:
    """Build a RewardSpec from its JSON form: {kind, nuggets[] | answer, ...}."""
    kind = config.get("kind")
    if kind not in KINDS:
        raise RewardError(f"reward spec kind must be one of {KINDS}, got {kind!r}")
    nuggets = None
    if config.get("nuggets"):
        nuggets = NuggetSet(tuple(config["nuggets"]))
    return RewardSpec(
        kind=kind,
        nuggets=nuggets,
        answer=config.get("answer"),
        judge=judge,
        partial_weight=float(config.get("partial_weight", 0.5)),
    )
