"""Trajectory feature extraction, search-behavior classification, statistics.

The classifier is a fixed-priority rule list over cheap deterministic
features; the first matching rule decides. Rules that need correctness get it
from the rollout's reward (below 0.5 counts as incorrect). An optional judge
pass can override a rule label, but it is off by default and nothing in the
package depends on it.

The statistics functions mirror the plots a trajectory study needs: search
diversity curves, recall-conditioned accuracy, pass@k transition matrices,
unbiased max@k curves, and search-efficiency summaries. All of them are pure
batch functions returning plain dicts and lists ready for CSV export.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .core import (
    DelveError,
    Rollout,
    context_char_count,
    extract_answer_from_text,
    extract_final_answer,
    parse_confidence,
)
from .oapl import GroupSample, group_key
from .retrieval import TOOL_NAME, doc_id_of, parse_result_chunk_ids
from .rewards import Judge, JudgeParseFailure, normalize_answer, parse_tagged
from .templates import load_data_lines

CATEGORIES = (
    "RunningOutOfContext",
    "ExhaustiveNoConvergence",
    "GivingUpEarly",
    "ConfidentlyWrongEarly",
    "ExploreThenVerify",
    "ExploreThenCommit",
)

CONFIDENCE_BANDS = ("high", "medium", "low", "absent")

PASSK_STATES = ("Solved", "Partial", "Unsolved")


class AnalysisError(DelveError):
    pass


@lru_cache(maxsize=1)
def uncertainty_phrases() -> tuple[str, ...]:
    return tuple(p.casefold() for p in load_data_lines("uncertainty_phrases.txt"))


@lru_cache(maxsize=1)
def verification_keywords() -> tuple[str, ...]:
    return tuple(p.casefold() for p in load_data_lines("verification_keywords.txt"))


# --- features ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryFeatures:
    truncated: bool
    n_searches: int
    n_unique_queries_first_third: int
    first_answer_step_fraction: float | None
    answer_changed: bool
    confidence: str
    n_verification_searches_after_answer: int
    context_usage_fraction: float
    search_active_at_end: bool
    uncertainty_phrase_hit: bool
    has_final_answer: bool
    answer_correct: bool | None = None

    def __post_init__(self) -> None:
        if self.confidence not in CONFIDENCE_BANDS:
            raise ValueError(f"unknown confidence band {self.confidence!r}")
        if not 0.0 <= self.context_usage_fraction <= 1.0:
            raise ValueError("context_usage_fraction outside [0, 1]")
        if self.first_answer_step_fraction is not None and not (
            0.0 <= self.first_answer_step_fraction <= 1.0
        ):
            raise ValueError("first_answer_step_fraction outside [0, 1]")


def _content_tokens(text: str) -> set[str]:
    return {t for t in re.findall(r"[a-z0-9]+", text.casefold()) if len(t) >= 3}


def is_verification_query(query: str, answer_text: str) -> bool:
    """Heuristic: a post-answer search verifies the answer if it uses a
    verification keyword or shares a content token with the answer."""
    q = query.casefold()
    if any(kw in q for kw in verification_keywords()):
        return True
    return bool(_content_tokens(query) & _content_tokens(answer_text))


def _confidence_band(value: int | None) -> str:
    if value is None:
        return "absent"
    if value >= 80:
        return "high"
    if value >= 50:
        return "medium"
    return "low"


def extract_features(
    rollout: Rollout,
    reward: float | None = None,
    threshold_chars: int = 150_000,
) -> TrajectoryFeatures:
    """Deterministic feature vector for one finished rollout.

    reward defaults to the rollout's own; context usage is measured against
    the compression threshold and capped at 1.
    """
    if reward is None:
        reward = rollout.reward
    indices = rollout.assistant_step_indices()
    total_steps = len(indices)

    searches: list[tuple[int, str]] = []
    for ordinal, idx in enumerate(indices):
        for call in rollout.steps[idx].tool_calls:
            if call.name == TOOL_NAME:
                query = call.arguments.get("query")
                searches.append((ordinal, query if isinstance(query, str) else ""))
    n_searches = len(searches)

    first_answer_ordinal: int | None = None
    first_answer_text: str | None = None
    for ordinal, idx in enumerate(indices):
        answer = extract_answer_from_text(rollout.steps[idx].content)
        if answer is not None:
            first_answer_ordinal, first_answer_text = ordinal, answer
            break
    # 0-based position over total assistant steps: an immediate answer is 0.0
    first_answer_step_fraction = (
        first_answer_ordinal / total_steps
        if total_steps and first_answer_ordinal is not None
        else None
    )

    final_answer = rollout.final_answer
    if final_answer is None:
        final_answer = extract_final_answer(rollout)
    has_final_answer = final_answer is not None

    answer_changed = (
        first_answer_text is not None
        and final_answer is not None
        and normalize_answer(first_answer_text) != normalize_answer(final_answer)
    )

    unique_first_third = {
        q for ordinal, q in searches if total_steps and ordinal < total_steps / 3
    }

    confidence_value: int | None = None
    for idx in reversed(indices):
        confidence_value = parse_confidence(rollout.steps[idx].content)
        if confidence_value is not None:
            break

    n_verification = 0
    if first_answer_ordinal is not None and first_answer_text is not None:
        for ordinal, query in searches:
            if ordinal > first_answer_ordinal and is_verification_query(query, first_answer_text):
                n_verification += 1

    final_chars = (
        rollout.char_count_history[-1]
        if rollout.char_count_history
        else context_char_count(rollout)
    )
    context_usage = min(1.0, final_chars / threshold_chars)

    search_active_at_end = bool(indices) and any(
        call.name == TOOL_NAME for call in rollout.steps[indices[-1]].tool_calls
    )

    phrase_hit = False
    for idx in indices:
        content = rollout.steps[idx].content.casefold()
        if any(p in content for p in uncertainty_phrases()):
            phrase_hit = True
            break

    answer_correct: bool | None = None
    if has_final_answer and reward is not None:
        answer_correct = reward >= 0.5

    return TrajectoryFeatures(
        truncated=rollout.truncated,
        n_searches=n_searches,
        n_unique_queries_first_third=len(unique_first_third),
        first_answer_step_fraction=first_answer_step_fraction,
        answer_changed=answer_changed,
        confidence=_confidence_band(confidence_value),
        n_verification_searches_after_answer=n_verification,
        context_usage_fraction=context_usage,
        search_active_at_end=search_active_at_end,
        uncertainty_phrase_hit=phrase_hit,
        has_final_answer=has_final_answer,
        answer_correct=answer_correct,
    )


# --- the classifier ------------------------------------------------------------------


@dataclass(frozen=True)
class BehaviorLabel:
    category: str
    rule_matched: str
    borderline: bool = False

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")


def classify(features: TrajectoryFeatures) -> BehaviorLabel:
    """First matching rule wins; total over all inputs."""
    f = features
    if f.truncated or (f.context_usage_fraction > 0.85 and f.search_active_at_end):
        return BehaviorLabel("RunningOutOfContext", "truncated, or >85% context while still searching")
    if (
        not f.truncated
        and f.n_searches >= 10
        and (
            not f.has_final_answer
            or (f.uncertainty_phrase_hit and f.confidence in ("low", "absent"))
        )
    ):
        return BehaviorLabel("ExhaustiveNoConvergence", ">=10 searches without converging")
    if (
        f.context_usage_fraction < 0.40
        and not f.search_active_at_end
        and f.n_searches < 8
        and not f.has_final_answer
    ):
        return BehaviorLabel("GivingUpEarly", "stopped early with budget left and no answer")
    if (
        f.has_final_answer
        and f.answer_correct is False
        and f.first_answer_step_fraction is not None
        and f.first_answer_step_fraction <= 0.5
        and f.confidence in ("high", "medium")
        and not f.answer_changed
    ):
        return BehaviorLabel("ConfidentlyWrongEarly", "early wrong answer, held with confidence")
    if (
        f.n_verification_searches_after_answer >= 2
        and f.first_answer_step_fraction is not None
        and f.first_answer_step_fraction < 0.70
    ):
        return BehaviorLabel("ExploreThenVerify", "answer then >=2 verification searches")
    if f.has_final_answer and f.n_unique_queries_first_third >= 2:
        return BehaviorLabel("ExploreThenCommit", "broad early exploration, then commit")
    if f.has_final_answer:
        return BehaviorLabel("ExploreThenCommit", "no rule matched; answered", borderline=True)
    return BehaviorLabel("GivingUpEarly", "no rule matched; unanswered", borderline=True)


_JUDGE_OVERRIDE_PROMPT = """A search agent's trajectory was summarized by these features:

{features}

A rule-based classifier labeled it: {category}

The possible categories are: {categories}.

If you disagree with the rule-based label with at least 95% confidence, output
the better category; otherwise repeat the rule-based one.

<category>[one category name]</category>"""


def classify_with_judge(features: TrajectoryFeatures, judge: Judge) -> BehaviorLabel:
    """Rule label plus an LLM second opinion; the judge must disagree
    decisively to override."""
    label = classify(features)
    prompt_judge = Judge(judge.client, _JUDGE_OVERRIDE_PROMPT, judge.sampling)
    raw_out = prompt_judge.ask(
        {
            "features": repr(features),
            "category": label.category,
            "categories": ", ".join(CATEGORIES),
        }
    )
    try:
        verdict = parse_tagged(raw_out, "category").strip()
    except JudgeParseFailure:
        return label
    if verdict in CATEGORIES and verdict != label.category:
        return BehaviorLabel(verdict, "judge_override")
    return label


def classify_rollouts(
    rollouts: Sequence[Rollout], threshold_chars: int = 150_000
) -> list[BehaviorLabel]:
    return [classify(extract_features(r, threshold_chars=threshold_chars)) for r in rollouts]


def label_distribution(labels: Sequence[BehaviorLabel]) -> dict[str, int]:
    counts = {c: 0 for c in CATEGORIES}
    for label in labels:
        counts[label.category] += 1
    return counts


# --- statistics -----------------------------------------------------------------------


def _search_doc_sequences(rollout: Rollout) -> list[set[str]]:
    """Per executed search, the set of doc ids its output returned."""
    search_call_ids = set()
    for m in rollout.steps:
        if m.role == "assistant":
            for call in m.tool_calls:
                if call.name == TOOL_NAME:
                    search_call_ids.add(call.id)
    sequences: list[set[str]] = []
    for m in rollout.steps:
        if m.role == "tool" and m.tool_call_id in search_call_ids:
            sequences.append({doc_id_of(cid) for cid in parse_result_chunk_ids(m.content)})
    return sequences


def query_counts(rollouts: Sequence[Rollout]) -> list[int]:
    return [len(_search_doc_sequences(r)) for r in rollouts]


def p90_query_cap(rollout_collections: Sequence[Sequence[Rollout]]) -> int:
    """Shared x-axis cap for diversity curves: the smallest 90th-percentile
    query count across collections (typically one collection per model)."""
    if not rollout_collections:
        raise ValueError("need at least one rollout collection")
    caps = []
    for collection in rollout_collections:
        counts = query_counts(collection)
        if not counts:
            raise ValueError("empty rollout collection")
        caps.append(float(np.percentile(counts, 90)))
    return max(1, int(math.floor(min(caps))))


def search_diversity(rollouts: Sequence[Rollout], query_cap: int) -> list[float]:
    """Mean cumulative unique documents after query 1..query_cap.

    Rollouts with fewer searches hold their final cumulative count, so every
    per-rollout curve (and hence the mean) is nondecreasing.
    """
    if query_cap < 1:
        raise ValueError("query_cap must be >= 1")
    if not rollouts:
        raise ValueError("need at least one rollout")
    curves = np.zeros((len(rollouts), query_cap), dtype=np.float64)
    for row, rollout in enumerate(rollouts):
        seen: set[str] = set()
        cumulative = []
        for docs in _search_doc_sequences(rollout):
            seen |= docs
            cumulative.append(len(seen))
        for q in range(query_cap):
            if q < len(cumulative):
                curves[row, q] = cumulative[q]
            else:
                curves[row, q] = cumulative[-1] if cumulative else 0.0
    return [float(v) for v in curves.mean(axis=0)]


def recall_conditioned_accuracy(
    rollouts: Sequence[Rollout], gold_docs: dict[str, set[str]]
) -> dict[str, dict]:
    """Mean reward bucketed by whether all/some/none of the gold documents
    were retrieved. Gold sets are looked up by the rollout's group key."""
    buckets: dict[str, list[float]] = {"all": [], "some": [], "none": []}
    for r in rollouts:
        gold = gold_docs.get(group_key(r.task_id))
        if not gold:
            raise AnalysisError(f"no gold documents for task {r.task_id!r}")
        if r.reward is None:
            raise AnalysisError(f"rollout {r.task_id!r} has no reward")
        retrieved: set[str] = set()
        for docs in _search_doc_sequences(r):
            retrieved |= docs
        hit = len(gold & retrieved)
        bucket = "all" if hit == len(gold) else ("none" if hit == 0 else "some")
        buckets[bucket].append(float(r.reward))
    return {
        name: {
            "n": len(values),
            "accuracy": float(np.mean(values)) if values else None,
        }
        for name, values in buckets.items()
    }


def _passk_state(rewards: Sequence[float], k: int | None, threshold: float) -> str:
    scores = list(rewards if k is None else rewards[:k])
    if not scores:
        raise ValueError("cannot compute a pass@k state over zero attempts")
    correct = [r >= threshold for r in scores]
    if all(correct):
        return "Solved"
    if not any(correct):
        return "Unsolved"
    return "Partial"


def passk_transition(
    groups_before: Sequence[GroupSample],
    groups_after: Sequence[GroupSample],
    k: int | None = None,
    threshold: float = 0.5,
) -> dict:
    """Row-normalized 3x3 movement matrix over {Solved, Partial, Unsolved}.

    Groups are matched by id; ids present on only one side are ignored.
    Rows sum to 1 wherever the row has any mass.
    """
    after_by_id = {g.group_id: g for g in groups_after}
    counts = np.zeros((3, 3), dtype=np.float64)
    state_index = {s: i for i, s in enumerate(PASSK_STATES)}
    matched = 0
    for g in groups_before:
        other = after_by_id.get(g.group_id)
        if other is None:
            continue
        matched += 1
        row = state_index[_passk_state(g.rewards, k, threshold)]
        col = state_index[_passk_state(other.rewards, k, threshold)]
        counts[row, col] += 1.0
    matrix = counts.copy()
    for i in range(3):
        row_sum = counts[i].sum()
        if row_sum > 0:
            matrix[i] = counts[i] / row_sum
    return {
        "states": list(PASSK_STATES),
        "counts": counts.astype(int).tolist(),
        "matrix": [[float(v) for v in row] for row in matrix],
        "matched_groups": matched,
    }


def maxk_curve(grouped_rewards: Sequence[Sequence[float]], ks: Sequence[int]) -> dict[int, float]:
    """Unbiased E[max over k attempts], averaged over groups.

    For a group of G rewards sorted ascending, the average of max over all
    C(G,k) subsets is sum_i r_(i) * C(i-1, k-1) / C(G, k); exact combinatorics,
    no sampling.
    """
    if not grouped_rewards:
        raise ValueError("need at least one group")
    out: dict[int, float] = {}
    for k in ks:
        if k < 1:
            raise ValueError("k must be >= 1")
        values = []
        for rewards in grouped_rewards:
            g = len(rewards)
            if k > g:
                raise ValueError(f"k={k} exceeds group size {g}")
            ordered = sorted(float(r) for r in rewards)
            total = math.comb(g, k)
            est = sum(
                ordered[i - 1] * math.comb(i - 1, k - 1) for i in range(k, g + 1)
            ) / total
            values.append(est)
        out[k] = float(np.mean(values))
    return out


def search_efficiency(rollouts: Sequence[Rollout], gold_docs: dict[str, set[str]]) -> dict:
    """Searches needed to first retrieve every gold document, and searches
    spent afterwards. Aggregated over rollouts that reach full recall."""
    to_full: list[int] = []
    after_full: list[int] = []
    for r in rollouts:
        gold = gold_docs.get(group_key(r.task_id))
        if not gold:
            raise AnalysisError(f"no gold documents for task {r.task_id!r}")
        sequences = _search_doc_sequences(r)
        seen: set[str] = set()
        reached = None
        for i, docs in enumerate(sequences):
            seen |= docs
            if reached is None and gold <= seen:
                reached = i + 1
        if reached is not None:
            to_full.append(reached)
            after_full.append(len(sequences) - reached)
    return {
        "n_rollouts": len(rollouts),
        "n_full_recall": len(to_full),
        "mean_searches_to_full_recall": float(np.mean(to_full)) if to_full else None,
        "mean_searches_after_full_recall": float(np.mean(after_full)) if after_full else None,
    }
