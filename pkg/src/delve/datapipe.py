"""Agentic QA synthesis and the cleanup stages that make it trainable.

Stage I: a synthesis agent explores the corpus through vector search and
proposes question-answer pairs with citations. Stage II: exact dedup against
the evaluation set and within the synthesized set, embedding-based near-dedup
with a paraphrase judge, pass-rate filtering over solver groups (delegated to
the off-policy module), and a quality judge over mixed-success questions.

Every stage returns explicit removal records so the pipeline report can prove
conservation: items in = items out + removals, per stage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DelveError, Rollout
from .environment import EnvFactory, GatewayAgent, run_rollout
from .gateway import Client, Sampling
from .oapl import FilterResult, GroupSample, filter_groups
from .retrieval import EmbeddingProvider, doc_id_of, parse_result_chunk_ids
from .rewards import Judge, JudgeParseFailure, parse_tagged, parse_yes_no
from .templates import fill, load_template

ATTEMPT_TRUNCATION_CHARS = 1000


class DatapipeError(DelveError):
    pass


class PipelineImbalance(DatapipeError):
    pass


# --- synthesis -----------------------------------------------------------------


@dataclass(frozen=True)
class SynthSeed:
    """Inputs for one synthesis rollout: style examples, optional seed
    documents to anchor exploration, and budgets."""

    few_shot_examples: tuple[tuple[str, str], ...]
    seed_documents: tuple[str, ...] = ()
    synthesis_template: str = field(default_factory=lambda: load_template("synthesis.txt"))
    max_steps: int = 50
    candidates_per_prompt: int = 8

    def __post_init__(self) -> None:
        if not self.few_shot_examples:
            raise ValueError("few_shot_examples must be nonempty")
        if self.max_steps < 1 or self.candidates_per_prompt < 1:
            raise ValueError("max_steps and candidates_per_prompt must be >= 1")


@dataclass(frozen=True)
class SyntheticQA:
    question: str
    answer: str
    citations: tuple[str, ...] = ()
    well_formed: bool = True

    def __post_init__(self) -> None:
        if self.well_formed and (not self.question or not self.answer):
            raise ValueError("well-formed pairs need nonempty question and answer")

    def to_record(self) -> dict:
        return {
            "question": self.question,
            "answer": self.answer,
            "citations": list(self.citations),
            "well_formed": self.well_formed,
        }

    @classmethod
    def from_record(cls, data: dict) -> "SyntheticQA":
        return cls(
            question=data["question"],
            answer=data["answer"],
            citations=tuple(data.get("citations", [])),
            well_formed=bool(data.get("well_formed", True)),
        )


def format_few_shots(pairs: Sequence[tuple[str, str]]) -> str:
    blocks = []
    for i, (q, a) in enumerate(pairs):
        blocks.append(f"Example {i + 1}:\nQ: {q}\nA: {a}")
    return "\n\n".join(blocks)


def _seed_documents_section(doc_ids: Sequence[str]) -> str:
    if not doc_ids:
        return ""
    return "Start your exploration from these seed documents: " + ", ".join(doc_ids)


def build_synthesis_prompt(seed: SynthSeed) -> str:
    return fill(
        seed.synthesis_template,
        {
            "few_shot_examples": format_few_shots(seed.few_shot_examples),
            "seed_documents_section": _seed_documents_section(seed.seed_documents),
            "max_candidates": str(seed.candidates_per_prompt),
        },
    )


def retrieved_doc_ids(rollout: Rollout) -> set[str]:
    """Every doc id that appeared in this rollout's search tool outputs."""
    ids: set[str] = set()
    for m in rollout.steps:
        if m.role == "tool":
            for chunk_id in parse_result_chunk_ids(m.content):
                ids.add(doc_id_of(chunk_id))
    return ids


@dataclass
class SynthesisResult:
    candidates: list[SyntheticQA]
    malformed: int
    citation_failures: int
    rollout: Rollout
    parse_error: str | None = None


def _parse_candidate_array(answer: str) -> list | None:
    try:
        value = json.loads(answer)
        if isinstance(value, list):
            return value
    except json.JSONDecodeError:
        pass
    start, end = answer.find("["), answer.rfind("]")
    if 0 <= start < end:
        try:
            value = json.loads(answer[start : end + 1])
            if isinstance(value, list):
                return value
        except json.JSONDecodeError:
            return None
    return None


def synthesize_qa(
    seed: SynthSeed,
    env_factory: EnvFactory,
    client: Client,
    sampling: Sampling = Sampling(),
    prompt_id: str = "synth",
) -> SynthesisResult:
    """One synthesis rollout -> validated candidate pairs.

    Malformed items (missing/empty question or answer, wrong shape) are
    discarded and counted; so are pairs citing documents the rollout never
    retrieved, since nothing grounds them.
    """
    env = env_factory()
    env.task.max_steps = seed.max_steps
    prompt = build_synthesis_prompt(seed)
    rollout = run_rollout(env, GatewayAgent(client, sampling), prompt, rollout_id=prompt_id)
    if rollout.final_answer is None:
        return SynthesisResult([], 0, 0, rollout, parse_error="no final answer")
    items = _parse_candidate_array(rollout.final_answer)
    if items is None:
        return SynthesisResult([], 0, 0, rollout, parse_error="final answer is not a JSON array")
    seen_docs = retrieved_doc_ids(rollout)
    candidates: list[SyntheticQA] = []
    malformed = 0
    citation_failures = 0
    for item in items[: seed.candidates_per_prompt]:
        if not isinstance(item, dict):
            malformed += 1
            continue
        question = item.get("question")
        answer = item.get("answer")
        citations = item.get("citations", [])
        if (
            not isinstance(question, str)
            or not question.strip()
            or not isinstance(answer, str)
            or not answer.strip()
            or not isinstance(citations, list)
            or not all(isinstance(c, str) for c in citations)
        ):
            malformed += 1
            continue
        if any(c not in seen_docs for c in citations):
            citation_failures += 1
            continue
        candidates.append(SyntheticQA(question.strip(), answer.strip(), tuple(citations)))
    return SynthesisResult(candidates, malformed, citation_failures, rollout)


# --- deduplication ----------------------------------------------------------------


@dataclass(frozen=True)
class Removal:
    index: int
    question: str
    reason: str
    detail: str = ""


@dataclass
class DedupResult:
    survivors: list[SyntheticQA]
    removed: list[Removal]
    quarantined: list[Removal] = field(default_factory=list)


def dedup_exact(
    candidates: Sequence[SyntheticQA],
    eval_questions: Sequence[str] = (),
    eval_answers: Sequence[str] = (),
) -> DedupResult:
    """Byte-equality dedup.

    Removes candidates whose question matches an evaluation question, whose
    answer matches an evaluation answer (exact-answer tasks pass eval_answers,
    others leave it empty), and within-set question duplicates, keeping the
    lowest-index copy.
    """
    eval_q = set(eval_questions)
    eval_a = set(eval_answers)
    survivors: list[SyntheticQA] = []
    removed: list[Removal] = []
    seen: set[str] = set()
    for i, c in enumerate(candidates):
        if c.question in eval_q:
            removed.append(Removal(i, c.question, "eval_question_match"))
            continue
        if eval_a and c.answer in eval_a:
            removed.append(Removal(i, c.question, "eval_answer_match", detail=c.answer))
            continue
        if c.question in seen:
            removed.append(Removal(i, c.question, "duplicate_in_set"))
            continue
        seen.add(c.question)
        survivors.append(c)
    return DedupResult(survivors, removed)


def _normalized_rows(vectors: np.ndarray) -> np.ndarray:
    mat = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return mat / norms


def dedup_near(
    candidates: Sequence[SyntheticQA],
    eval_questions: Sequence[str],
    top_m: int,
    judge: Judge,
    provider: EmbeddingProvider,
    eval_answers: Sequence[str] | None = None,
) -> DedupResult:
    """Embedding-gated paraphrase dedup.

    For each evaluation item, the top_m most similar candidate questions (by
    cosine over the provider's embeddings; ties to the lower index) go to the
    paraphrase judge; a yes verdict removes the candidate. Judge outputs that
    fail to parse quarantine the pair: the candidate stays, flagged.
    """
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    if eval_answers is not None and len(eval_answers) != len(eval_questions):
        raise ValueError("one eval answer per eval question")
    if not candidates or not eval_questions:
        return DedupResult(list(candidates), [])
    cand_vecs = _normalized_rows(provider.embed([c.question for c in candidates]))
    eval_vecs = _normalized_rows(provider.embed(list(eval_questions)))
    sims = eval_vecs @ cand_vecs.T

    removed_idx: set[int] = set()
    removed: list[Removal] = []
    quarantined: list[Removal] = []
    m = min(top_m, len(candidates))
    # neighborhoods are fixed up front over the full candidate set, so the
    # removal set is exactly the union of judged-yes neighborhoods
    neighborhoods = [
        sorted(range(len(candidates)), key=lambda ci: (-sims[e, ci], ci))[:m]
        for e in range(len(eval_questions))
    ]
    for e, eval_question in enumerate(eval_questions):
        for ci in neighborhoods[e]:
            if ci in removed_idx:
                continue
            mapping = {
                "generated_question": candidates[ci].question,
                "validation_question": eval_question,
                "generated_answer": candidates[ci].answer,
            }
            if eval_answers is not None:
                mapping["validation_answer"] = eval_answers[e]
            raw = judge.ask(mapping)
            try:
                is_dup = parse_yes_no(raw, "duplicate")
            except JudgeParseFailure:
                quarantined.append(
                    Removal(ci, candidates[ci].question, "judge_parse_failure", detail=raw[:200])
                )
                continue
            if is_dup:
                removed_idx.add(ci)
                removed.append(
                    Removal(
                        ci,
                        candidates[ci].question,
                        "near_duplicate",
                        detail=f"eval#{e} sim={sims[e, ci]:.3f}",
                    )
                )
    survivors = [c for i, c in enumerate(candidates) if i not in removed_idx]
    return DedupResult(survivors, removed, quarantined)


# --- pass-rate and quality filtering -------------------------------------------------


def pass_rate_filter(groups: Sequence[GroupSample], threshold: float | None) -> FilterResult:
    """Drop all-solved / all-unsolved solver groups (binarized at threshold)."""
    return filter_groups(groups, binarize_threshold=threshold)


@dataclass(frozen=True)
class Attempt:
    text: str
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("attempt score outside [0, 1]")


@dataclass(frozen=True)
class QualityVerdict:
    valid: bool
    reasoning: str


def format_attempts(attempts: Sequence[Attempt]) -> str:
    blocks = []
    for i, a in enumerate(attempts):
        blocks.append(f"Attempt {i + 1} (score: {a.score:g}):\n{a.text[:ATTEMPT_TRUNCATION_CHARS]}")
    return "\n\n".join(blocks)


def quality_filter(
    question: str,
    attempts: Sequence[Attempt],
    judge: Judge,
    ground_truth: str | None = None,
    nuggets: Sequence[str] | None = None,
) -> QualityVerdict:
    """Ask the quality judge whether a mixed-success question is trainable.

    Exact-answer tasks pass ground_truth; nugget tasks pass nuggets (the
    judge then also sees avg/max/min coverage). Attempt texts are truncated
    before judging.
    """
    if not attempts:
        raise ValueError("quality filtering needs at least one attempt")
    mapping = {"question": question, "attempts": format_attempts(attempts)}
    if ground_truth is not None:
        mapping["ground_truth"] = ground_truth
    if nuggets is not None:
        scores = [a.score for a in attempts]
        mapping["nuggets"] = json.dumps(list(nuggets), ensure_ascii=False)
        mapping["avg"] = f"{100.0 * sum(scores) / len(scores):.1f}"
        mapping["max"] = f"{100.0 * max(scores):.1f}"
        mapping["min"] = f"{100.0 * min(scores):.1f}"
    raw = judge.ask(mapping)
    valid = parse_yes_no(raw, "valid")
    try:
        reasoning = parse_tagged(raw, "reasoning")
    except JudgeParseFailure:
        reasoning = raw.strip()
    return QualityVerdict(valid=valid, reasoning=reasoning)


# --- reporting --------------------------------------------------------------------


@dataclass(frozen=True)
class StageReport:
    stage: str
    items_in: int
    items_out: int
    removals: dict[str, int] = field(default_factory=dict)


def pipeline_report(stages: Sequence[StageReport]) -> dict:
    """Per-stage counts, removal reasons, and yields. Raises on any stage
    whose arithmetic does not balance."""
    rows = []
    for s in stages:
        removed = sum(s.removals.values())
        if s.items_in != s.items_out + removed:
            raise PipelineImbalance(
                f"stage {s.stage!r}: {s.items_in} in != {s.items_out} out + {removed} removed"
            )
        rows.append(
            {
                "stage": s.stage,
                "items_in": s.items_in,
                "items_out": s.items_out,
                "removed": removed,
                "removals": dict(s.removals),
                "yield_pct": round(100.0 * s.items_out / s.items_in, 2) if s.items_in else 100.0,
            }
        )
    report: dict = {"stages": rows}
    if rows:
        first_in = rows[0]["items_in"]
        final_out = rows[-1]["items_out"]
        report["overall_yield_pct"] = round(100.0 * final_out / first_in, 2) if first_in else 100.0
    return report


def document_coverage(candidates: Sequence[SyntheticQA], corpus_doc_count: int) -> float:
    """Fraction of corpus documents cited by at least one candidate."""
    if corpus_doc_count < 1:
        raise ValueError("corpus_doc_count must be >= 1")
    cited = {d for c in candidates for d in c.citations}
    return len(cited) / corpus_doc_count
