"""Off-policy advantage regression: targets, segment splitting, loss, filtering.

The training signal is a squared-error regression of the policy/reference
log-probability ratio onto the optimal advantage r - V*, with V* estimated
per prompt from a group of rollouts via a soft-max over rewards:

    V(x) = beta1 * ln( (1/G) * sum_i exp(r_i / beta1) )
    loss = ( beta2 * sum_masked(ln pi - ln pi_ref) - (r - V) )^2

beta1 interpolates the value estimate between max (small) and mean (large)
reward; beta2 sets the implied KL strength. Neither has a package default.

Rollouts that compressed their context are split at each compression boundary
into 2C+1 training pairs: C+1 followup segments (the agent's activity, whose
context is the initial prompt or the standing summary state) and C
compression pairs (the compressed history as context, the summary as
completion). Every pair inherits the whole rollout's reward and the group's
V* computed at the initial prompt. Mask spans cover policy-generated
characters only, so tool outputs never receive gradient.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import (
    DelveError,
    Message,
    Rollout,
    read_jsonl,
    render_messages,
)

FOLLOWUP_SEGMENT = "followup_segment"
COMPRESSION_PAIR = "compression_pair"

DATASET_FIELDS = (
    "group_id",
    "pair_index",
    "kind",
    "context",
    "completion",
    "mask_spans",
    "reward",
    "vstar",
    "advantage",
    "round",
    "source_model",
)


class OaplError(DelveError):
    pass


class InconsistentBoundaries(OaplError):
    pass


class NonFiniteLogProb(OaplError):
    pass


@dataclass(frozen=True)
class Betas:
    beta1: float
    beta2: float

    def __post_init__(self) -> None:
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("both betas must be positive")


@dataclass(frozen=True)
class GroupSample:
    """G rollouts of one prompt plus their rewards, the V* estimation unit."""

    group_id: str
    prompt: str
    rollouts: tuple[Rollout, ...]
    rewards: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.rollouts:
            raise ValueError("a group needs at least one rollout")
        if len(self.rollouts) != len(self.rewards):
            raise ValueError("one reward per rollout")
        for r in self.rewards:
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"reward {r} outside [0, 1]")

    @property
    def size(self) -> int:
        return len(self.rollouts)

    def to_record(self) -> dict:
        return {
            "group_id": self.group_id,
            "prompt": self.prompt,
            "rewards": [float(r) for r in self.rewards],
            "rollouts": [r.to_record() for r in self.rollouts],
        }

    @classmethod
    def from_record(cls, data: dict) -> "GroupSample":
        rollouts = tuple(Rollout.from_record(r) for r in data["rollouts"])
        rewards = data.get("rewards")
        if rewards is None:
            rewards = [r.reward for r in rollouts]
        if any(r is None for r in rewards):
            raise OaplError(f"group {data.get('group_id')!r} has unrewarded rollouts")
        return cls(
            group_id=data["group_id"],
            prompt=data["prompt"],
            rollouts=rollouts,
            rewards=tuple(float(r) for r in rewards),
        )


_GROUP_MEMBER_RE = re.compile(r"^(?P<base>.+)/g\d+$")


def group_key(task_id: str) -> str:
    """The prompt-level id behind a group member's task id: strips the /g<m>
    suffix the group strategy appends, leaves anything else untouched."""
    m = _GROUP_MEMBER_RE.match(task_id)
    return m.group("base") if m else task_id


def group_rollouts(rollouts: Iterable[Rollout]) -> list[GroupSample]:
    """Group flat rollouts by task id, honoring the <prompt>/g<m> convention
    the group strategy uses. Ungrouped ids form singleton groups."""
    order: list[str] = []
    members: dict[str, list[Rollout]] = {}
    for r in rollouts:
        key = group_key(r.task_id)
        if key not in members:
            members[key] = []
            order.append(key)
        members[key].append(r)
    groups = []
    for key in order:
        rs = members[key]
        for r in rs:
            if r.reward is None:
                raise OaplError(f"rollout {r.task_id!r} has no reward; cannot build a group")
        groups.append(
            GroupSample(
                group_id=key,
                prompt=rs[0].prompt,
                rollouts=tuple(rs),
                rewards=tuple(float(r.reward) for r in rs),  # type: ignore[arg-type]
            )
        )
    return groups


def load_groups(path: str) -> list[GroupSample]:
    """Read a groups JSONL, or a flat rollout JSONL (grouped by task id)."""
    records = list(read_jsonl(path))
    if not records:
        return []
    if "rollouts" in records[0]:
        return [GroupSample.from_record(rec) for rec in records]
    return group_rollouts(Rollout.from_record(rec) for rec in records)


# --- value and advantage -------------------------------------------------------


def estimate_vstar(rewards: Sequence[float], beta1: float) -> float:
    """Soft-max value of a reward group.

    Computed in log space so tiny beta1 (the max limit) stays stable. The
    result is clamped to [min r, max r]; mathematically it always lies there,
    and the clamp makes the G=1 and constant-reward cases exact.
    """
    if beta1 <= 0:
        raise ValueError("beta1 must be positive")
    if len(rewards) == 0:
        raise ValueError("need at least one reward")
    if len(rewards) == 1:
        return float(rewards[0])
    r = np.asarray(rewards, dtype=np.float64)
    value = beta1 * (logsumexp(r / beta1) - math.log(r.size))
    return float(min(max(value, r.min()), r.max()))


def advantage(reward: float, vstar: float) -> float:
    return float(reward) - float(vstar)


# --- segment splitting -----------------------------------------------------------


@dataclass(frozen=True)
class SegmentPair:
    """One (context, completion) training unit.

    mask_spans index into completion and cover policy-generated characters
    only. reward is the whole rollout's reward; vstar the group estimate at
    the initial prompt.
    """

    context: str
    completion: str
    mask_spans: tuple[tuple[int, int], ...]
    reward: float
    vstar: float
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in (FOLLOWUP_SEGMENT, COMPRESSION_PAIR):
            raise ValueError(f"unknown segment kind {self.kind!r}")
        for a, b in self.mask_spans:
            if not 0 <= a < b <= len(self.completion):
                raise ValueError(f"mask span ({a},{b}) outside completion bounds")

    @property
    def advantage(self) -> float:
        return advantage(self.reward, self.vstar)


def _frame_messages(rollout: Rollout) -> list[Message]:
    return [
        Message(role="system", content=rollout.system_prompt),
        Message(role="user", content=rollout.prompt),
    ]


def _check_boundaries(rollout: Rollout) -> list[int]:
    bounds = list(rollout.compression_boundaries)
    for b1, b2 in zip(bounds, bounds[1:]):
        if b2 <= b1:
            raise InconsistentBoundaries("compression boundaries must be strictly increasing")
    for b in bounds:
        if not 0 <= b < len(rollout.steps):
            raise InconsistentBoundaries(f"boundary {b} outside the step range")
        if rollout.steps[b].role != "assistant":
            raise InconsistentBoundaries(f"boundary {b} does not point at a summary message")
    return bounds


def split_segments(rollout: Rollout, vstar: float, reward: float | None = None) -> list[SegmentPair]:
    """Split one finished rollout at its compression boundaries: 2C+1 pairs.

    Chronological order: followup 0 (context = initial prompt), then per
    compression event the compression pair (context = the exact history that
    was compressed, completion = the summary) and the next followup segment
    (context = prompt frame + standing summary). reward defaults to the
    rollout's own.
    """
    if reward is None:
        reward = rollout.reward
    if reward is None:
        raise OaplError(f"rollout {rollout.task_id!r} has no reward")
    reward = float(reward)
    bounds = _check_boundaries(rollout)
    pairs: list[SegmentPair] = []

    def followup(context_messages: list[Message], window: list[Message]) -> SegmentPair:
        rendered = render_messages(window)
        return SegmentPair(
            context=render_messages(context_messages).text,
            completion=rendered.text,
            mask_spans=rendered.policy_spans,
            reward=reward,
            vstar=vstar,
            kind=FOLLOWUP_SEGMENT,
        )

    start = 0
    context = _frame_messages(rollout)
    for b in bounds:
        pairs.append(followup(context, rollout.steps[start:b]))
        summary = rollout.steps[b]
        compressed = rollout.steps[start:b]
        mask = ((0, len(summary.content)),) if summary.content else ()
        pairs.append(
            SegmentPair(
                context=render_messages(compressed).text,
                completion=summary.content,
                mask_spans=mask,
                reward=reward,
                vstar=vstar,
                kind=COMPRESSION_PAIR,
            )
        )
        context = _frame_messages(rollout) + [summary]
        start = b + 1
    pairs.append(followup(context, rollout.steps[start:]))
    return pairs


# --- loss ------------------------------------------------------------------------


@dataclass(frozen=True)
class LogProbBundle:
    """Per-masked-position log-probabilities under policy and reference."""

    logp_policy: tuple[float, ...]
    logp_ref: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.logp_policy) != len(self.logp_ref):
            raise ValueError("policy and reference logprob lengths differ")
        for v in (*self.logp_policy, *self.logp_ref):
            if not math.isfinite(v):
                raise NonFiniteLogProb(f"non-finite log-probability {v!r}")

    def log_ratio_sum(self) -> float:
        return float(sum(self.logp_policy) - sum(self.logp_ref))


def loss_from_ratio(log_ratio_sum: float, advantage_value: float, beta2: float) -> float:
    """(beta2 * s - A)^2: the regression loss as a function of the scalar
    sequence log-ratio. Zero iff beta2 * s equals the advantage."""
    if beta2 <= 0:
        raise ValueError("beta2 must be positive")
    d = beta2 * log_ratio_sum - advantage_value
    return d * d


def loss_grad_wrt_ratio(log_ratio_sum: float, advantage_value: float, beta2: float) -> float:
    """d/ds of loss_from_ratio: 2 * beta2 * (beta2 * s - A)."""
    if beta2 <= 0:
        raise ValueError("beta2 must be positive")
    return 2.0 * beta2 * (beta2 * log_ratio_sum - advantage_value)


def oapl_loss(bundle: LogProbBundle, advantage_value: float, beta2: float) -> float:
    """Squared regression loss for one segment pair. An empty bundle is the
    untrained-policy convention: log-ratio 0, loss = advantage^2."""
    return loss_from_ratio(bundle.log_ratio_sum(), advantage_value, beta2)


# --- group filtering --------------------------------------------------------------


@dataclass
class FilterResult:
    kept: list[GroupSample]
    removed_solved: list[str]
    removed_unsolved: list[str]

    @property
    def n_removed(self) -> int:
        return len(self.removed_solved) + len(self.removed_unsolved)


def binarize(rewards: Sequence[float], threshold: float) -> tuple[float, ...]:
    """Inclusive threshold: r >= threshold counts as correct."""
    return tuple(1.0 if r >= threshold else 0.0 for r in rewards)


def filter_groups(
    groups: Sequence[GroupSample], binarize_threshold: float | None = None
) -> FilterResult:
    """Drop groups whose (binarized) rewards are all-correct or all-wrong;
    they carry no contrast for the advantage. Kept groups keep raw rewards."""
    kept: list[GroupSample] = []
    solved: list[str] = []
    unsolved: list[str] = []
    for g in groups:
        scores = (
            binarize(g.rewards, binarize_threshold)
            if binarize_threshold is not None
            else g.rewards
        )
        if all(s == 1.0 for s in scores):
            solved.append(g.group_id)
        elif all(s == 0.0 for s in scores):
            unsolved.append(g.group_id)
        else:
            kept.append(g)
    return FilterResult(kept=kept, removed_solved=solved, removed_unsolved=unsolved)


# --- dataset construction -----------------------------------------------------------


def build_dataset(
    groups: Sequence[GroupSample],
    betas: Betas,
    round_index: int = 0,
    source_model: str = "",
) -> list[dict]:
    """Expand filtered groups into flat training records.

    Output order is (group order, rollout order, chronological pair order);
    pair_index runs over all pairs of a group. Field set is the file format.
    """
    records: list[dict] = []
    for g in groups:
        vstar = estimate_vstar(g.rewards, betas.beta1)
        pair_index = 0
        for rollout, reward in zip(g.rollouts, g.rewards):
            for pair in split_segments(rollout, vstar, reward=reward):
                records.append(
                    {
                        "group_id": g.group_id,
                        "pair_index": pair_index,
                        "kind": pair.kind,
                        "context": pair.context,
                        "completion": pair.completion,
                        "mask_spans": [list(s) for s in pair.mask_spans],
                        "reward": pair.reward,
                        "vstar": pair.vstar,
                        "advantage": pair.advantage,
                        "round": round_index,
                        "source_model": source_model,
                    }
                )
                pair_index += 1
    return records
