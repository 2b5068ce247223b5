"""Single command-line entry point for the whole stack.

Subcommands: ingest, index, rollout, ttc (parallel | vgs), synth (run | dedup
| quality), oapl (build), eval (score | nuggetize), analyze (classify |
stats). Every run is offline-capable: generation comes from a scripted-client
JSONL, embeddings from the deterministic hash embedder, and the one --seed on
the top-level group feeds every stochastic choice (which, with scripting, is
just the embedder). Each command writes exactly one manifest next to its
primary output recording the command, seed, config digest, and input digests.

Errors surface as a machine-readable JSON record on stderr and exit code 2;
configuration problems carry the offending key path.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import click

from . import analysis as analysis_mod
from . import datapipe as datapipe_mod
from . import oapl as oapl_mod
from . import ttc as ttc_mod
from .core import DelveError, Rollout, TaskSpec, read_jsonl, write_jsonl
from .environment import Dispatcher, Environment, GatewayAgent, GroupStrategy, SimpleStrategy
from .gateway import Sampling, ScriptedClient
from .oapl import Betas, group_key
from .plugins import CompressionConfig, CompressionPlugin
from .retrieval import (
    TOOL_NAME,
    HashEmbedder,
    IngestionPolicy,
    SearchTool,
    build_index,
    hash_provider_from_id,
    ingest as ingest_docs,
    load_index,
    save_index,
)
from .rewards import Judge, RewardRegistry, nuggetize, spec_from_config
from .templates import load_template


class ConfigError(DelveError):
    """A bad configuration key or path; carries the offending key path."""

    def __init__(self, message: str, key_path: str = "") -> None:
        super().__init__(message)
        self.key_path = key_path


# --- small helpers -----------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _emit_manifest(
    command: str,
    seed: int,
    params: dict[str, Any],
    inputs: Sequence[str],
    outputs: Sequence[str],
    started_at: str,
) -> str:
    manifest = {
        "command": command,
        "seed": seed,
        "config_digest": hashlib.sha256(
            json.dumps(params, sort_keys=True, default=str).encode("utf-8")
        ).hexdigest(),
        "input_digests": {p: _sha256_file(p) for p in inputs if Path(p).is_file()},
        "output_paths": list(outputs),
        "started_at": started_at,
        "finished_at": _now(),
    }
    path = f"{outputs[0]}.manifest.json"
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _read_jsonl(path: str, key_path: str) -> list[dict]:
    if not Path(path).is_file():
        raise ConfigError(f"file not found: {path}", key_path)
    return list(read_jsonl(path))


def _load_json(path: str, key_path: str) -> Any:
    if not Path(path).is_file():
        raise ConfigError(f"file not found: {path}", key_path)
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}", key_path) from exc


def _load_script(path: str, key_path: str) -> ScriptedClient:
    if not Path(path).is_file():
        raise ConfigError(f"file not found: {path}", key_path)
    return ScriptedClient.from_jsonl(path)


def _load_vector_index(path: str, key_path: str):
    if not Path(path).is_file():
        raise ConfigError(f"file not found: {path}", key_path)
    index = load_index(path)
    return index, hash_provider_from_id(index.provider_id)


def _cfg(data: dict, key: str, path: str, required: bool = True, default: Any = None) -> Any:
    full = f"{path}.{key}" if path else key
    if key not in data or data[key] is None:
        if required:
            raise ConfigError("missing config key", full)
        return default
    return data[key]


def _text_or_file(value: str) -> str:
    if value.startswith("@"):
        p = Path(value[1:])
        if not p.is_file():
            raise ConfigError(f"file not found: {p}", "--system")
        return p.read_text(encoding="utf-8")
    return value


# --- the group ----------------------------------------------------------------------


@click.group(name="delve")
@click.option("--seed", type=int, default=0, show_default=True, help="Master seed; every stochastic choice derives from it.")
@click.pass_context
def cli(ctx: click.Context, seed: int) -> None:
    """Knowledge-agent toolkit: retrieval, rollouts, test-time compute, training data."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed


# --- ingest / index -------------------------------------------------------------------


@cli.command(name="ingest")
@click.option("--corpus", required=True, help="Raw documents JSONL ({doc_id, text | pages | chunks}).")
@click.option("--policy", default="whole", show_default=True, help="truncate:<T> | pages | chunks | whole")
@click.option("--out", required=True, help="Chunks JSONL.")
@click.pass_context
def ingest_cmd(ctx: click.Context, corpus: str, policy: str, out: str) -> None:
    """Chunk a raw document corpus."""
    started = _now()
    try:
        parsed = IngestionPolicy.parse(policy)
    except ValueError as exc:
        raise ConfigError(str(exc), "--policy") from exc
    docs = _read_jsonl(corpus, "--corpus")
    result = ingest_docs(docs, parsed)
    write_jsonl(
        out,
        (
            {
                "doc_id": c.doc_id,
                "chunk_id": c.chunk_id,
                "text": c.text,
                "token_estimate": c.token_estimate,
            }
            for c in result.chunks
        ),
    )
    _emit_manifest("ingest", ctx.obj["seed"], {"policy": policy}, [corpus], [out], started)
    click.echo(f"{len(result.chunks)} chunks written, {result.skipped_empty} empty documents skipped")


@cli.command(name="index")
@click.option("--corpus", required=True, help="Raw documents JSONL.")
@click.option("--policy", default="whole", show_default=True)
@click.option("--dim", type=int, default=256, show_default=True, help="Embedding dimension.")
@click.option("--out", required=True, help="Binary index file.")
@click.pass_context
def index_cmd(ctx: click.Context, corpus: str, policy: str, dim: int, out: str) -> None:
    """Chunk, embed, and save a searchable index."""
    started = _now()
    try:
        parsed = IngestionPolicy.parse(policy)
    except ValueError as exc:
        raise ConfigError(str(exc), "--policy") from exc
    docs = _read_jsonl(corpus, "--corpus")
    result = ingest_docs(docs, parsed)
    provider = HashEmbedder(dimension=dim, seed=ctx.obj["seed"])
    index = build_index(result.chunks, provider)
    save_index(index, out)
    _emit_manifest(
        "index", ctx.obj["seed"], {"policy": policy, "dim": dim}, [corpus], [out], started
    )
    click.echo(f"indexed {len(index)} chunks (dim {dim}, provider {index.provider_id}) -> {out}")


# --- rollout ---------------------------------------------------------------------------


def _registry_from_prompts(records: list[dict], client: ScriptedClient) -> RewardRegistry | None:
    registry = RewardRegistry()
    found = 0
    for i, rec in enumerate(records):
        cfg = rec.get("reward")
        if not cfg:
            continue
        judge = None
        if cfg.get("kind") in ("nugget", "single_nugget"):
            judge = Judge(client, load_template("nugget_judge.txt"))
        try:
            registry.register(_cfg(rec, "task_id", f"prompts[{i}]"), spec_from_config(cfg, judge))
        except (ValueError, DelveError) as exc:
            raise ConfigError(str(exc), f"prompts[{i}].reward") from exc
        found += 1
    if found and found < len(records):
        raise ConfigError(
            "reward configs must cover all prompt records or none", "prompts[].reward"
        )
    return registry if found else None


@cli.command(name="rollout")
@click.option("--index", "index_path", required=True, help="Binary index from `index`.")
@click.option("--prompts", "prompts_path", required=True, help="JSONL: {task_id, prompt, reward?}.")
@click.option("--script", "script_path", required=True, help="Scripted-client JSONL.")
@click.option("--out", required=True, help="Rollout log JSONL.")
@click.option("--group", "group_size", type=int, default=1, show_default=True, help="Rollouts per prompt.")
@click.option("--k", type=int, default=5, show_default=True, help="Search depth per query.")
@click.option("--max-steps", type=int, default=200, show_default=True)
@click.option("--system", "system_prompt", default="", help="System prompt text, or @file.")
@click.option("--compress-threshold", type=int, default=None, help="Enable context compression above this many characters.")
@click.option("--summary-budget", type=int, default=4000, show_default=True)
@click.option("--concurrency", type=int, default=1, show_default=True)
@click.pass_context
def rollout_cmd(
    ctx: click.Context,
    index_path: str,
    prompts_path: str,
    script_path: str,
    out: str,
    group_size: int,
    k: int,
    max_steps: int,
    system_prompt: str,
    compress_threshold: int | None,
    summary_budget: int,
    concurrency: int,
) -> None:
    """Run the agent over a prompt file and log full rollouts."""
    started = _now()
    index, provider = _load_vector_index(index_path, "--index")
    client = _load_script(script_path, "--script")
    prompt_records = _read_jsonl(prompts_path, "--prompts")
    prompts = [
        (_cfg(rec, "task_id", f"prompts[{i}]"), _cfg(rec, "prompt", f"prompts[{i}]"))
        for i, rec in enumerate(prompt_records)
    ]
    registry = _registry_from_prompts(prompt_records, client)
    evaluator = None
    if registry is not None:
        evaluator = lambda r: float(registry.evaluate(group_key(r.task_id), r))  # noqa: E731
    system_text = _text_or_file(system_prompt)

    def env_factory() -> Environment:
        task = TaskSpec(
            task_id="cli",
            retrieval_k=k,
            max_steps=max_steps,
            compression_threshold_chars=compress_threshold or 150_000,
        )
        plugins = []
        if compress_threshold is not None:
            plugins.append(
                CompressionPlugin(
                    CompressionConfig(
                        threshold_chars=compress_threshold,
                        summary_budget_chars=summary_budget,
                        template=load_template("compression.txt"),
                    ),
                    client,
                )
            )
        return Environment(
            task=task,
            tools={TOOL_NAME: SearchTool(index, provider, k)},
            reward_evaluator=evaluator,
            plugins=plugins,
            system_prompt=system_text,
        )

    strategy = GroupStrategy(group_size) if group_size > 1 else SimpleStrategy()
    dispatcher = Dispatcher(concurrency_limit=concurrency)
    rollouts = list(dispatcher.run(strategy, prompts, env_factory, lambda: GatewayAgent(client, Sampling())))
    rollouts.sort(key=lambda r: r.task_id)
    write_jsonl(out, (r.to_record() for r in rollouts))
    _emit_manifest(
        "rollout",
        ctx.obj["seed"],
        {
            "group": group_size,
            "k": k,
            "max_steps": max_steps,
            "compress_threshold": compress_threshold,
            "concurrency": concurrency,
        },
        [index_path, prompts_path, script_path],
        [out],
        started,
    )
    answered = sum(1 for r in rollouts if r.final_answer is not None)
    click.echo(f"{len(rollouts)} rollouts written ({answered} answered)")


# --- ttc -------------------------------------------------------------------------------


def _load_task_cfg(path: str) -> dict:
    data = _load_json(path, "--task")
    _cfg(data, "task_id", "task")
    _cfg(data, "prompt", "task")
    return data


def _ttc_env_factory(
    index_path: str, script: ScriptedClient, task_cfg: dict, sink: list[Rollout]
):
    index, provider = _load_vector_index(index_path, "--index")
    k = int(task_cfg.get("k", 5))
    max_steps = int(task_cfg.get("max_steps", 200))
    system_text = task_cfg.get("system", "")
    registry = None
    if task_cfg.get("reward"):
        judge = None
        if task_cfg["reward"].get("kind") in ("nugget", "single_nugget"):
            judge = Judge(script, load_template("nugget_judge.txt"))
        registry = RewardRegistry()
        registry.register(task_cfg["task_id"], spec_from_config(task_cfg["reward"], judge))

    def factory() -> Environment:
        task = TaskSpec(task_id=task_cfg["task_id"], retrieval_k=k, max_steps=max_steps)
        evaluator = None
        if registry is not None:
            evaluator = lambda r: float(  # noqa: E731
                registry.evaluate(task_cfg["task_id"], r)
            )
        return Environment(
            task=task,
            tools={TOOL_NAME: SearchTool(index, provider, k)},
            reward_evaluator=evaluator,
            plugins=[],
            result_sink=sink.append,
            system_prompt=system_text,
        )

    return factory


@cli.group(name="ttc")
def ttc_group() -> None:
    """Test-time-compute strategies."""


@ttc_group.command(name="parallel")
@click.option("--n", type=int, required=True, help="Number of independent rollouts.")
@click.option("--task", "task_path", required=True, help="Task config JSON ({task_id, prompt, ...}).")
@click.option("--index", "index_path", required=True)
@click.option("--script", "script_path", required=True)
@click.option("--out", required=True, help="All N+1 rollouts, JSONL.")
@click.option("--no-tools", is_flag=True, help="Strip tools from the aggregation rollout.")
@click.option("--concurrency", type=int, default=1, show_default=True)
@click.pass_context
def ttc_parallel_cmd(
    ctx: click.Context,
    n: int,
    task_path: str,
    index_path: str,
    script_path: str,
    out: str,
    no_tools: bool,
    concurrency: int,
) -> None:
    """Parallel thinking: N rollouts, one aggregation rollout."""
    started = _now()
    task_cfg = _load_task_cfg(task_path)
    client = _load_script(script_path, "--script")
    sink: list[Rollout] = []
    factory = _ttc_env_factory(index_path, client, task_cfg, sink)
    config = ttc_mod.ParallelThinkingConfig(
        n_rollouts=n, aggregator_tools_enabled=not no_tools
    )
    aggregate = ttc_mod.parallel_think(
        task_cfg["prompt"],
        config,
        factory,
        client,
        prompt_id=task_cfg["task_id"],
        concurrency=concurrency,
    )
    sink.sort(key=lambda r: r.task_id)
    write_jsonl(out, (r.to_record() for r in sink))
    _emit_manifest(
        "ttc parallel",
        ctx.obj["seed"],
        {"n": n, "no_tools": no_tools},
        [task_path, index_path, script_path],
        [out],
        started,
    )
    click.echo(
        json.dumps(
            {
                "final_answer": aggregate.final_answer,
                "aggregation_steps": aggregate.step_count,
                "rollouts_logged": len(sink),
            }
        )
    )


@ttc_group.command(name="vgs")
@click.option("--k", type=int, default=2, show_default=True, help="Candidates per step.")
@click.option("--trees", type=int, default=1, show_default=True)
@click.option("--agg", type=click.Choice(["mv", "wmv", "bon"]), default="mv", show_default=True)
@click.option("--task", "task_path", required=True)
@click.option("--index", "index_path", required=True)
@click.option("--script", "script_path", required=True)
@click.option("--values", "values_path", required=True, help="Value model JSON: {table: {substring: score}, default: 0.5}.")
@click.option("--out", required=True, help="Tree rollouts, JSONL.")
@click.option("--concurrency", type=int, default=1, show_default=True)
@click.pass_context
def ttc_vgs_cmd(
    ctx: click.Context,
    k: int,
    trees: int,
    agg: str,
    task_path: str,
    index_path: str,
    script_path: str,
    values_path: str,
    out: str,
    concurrency: int,
) -> None:
    """Value-guided search: per-step branching, tree-level voting."""
    started = _now()
    task_cfg = _load_task_cfg(task_path)
    client = _load_script(script_path, "--script")
    values_cfg = _load_json(values_path, "--values")
    try:
        value_model = ttc_mod.ScriptedValueModel(
            values_cfg.get("table", {}), default=float(values_cfg.get("default", 0.5))
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "--values") from exc
    sink: list[Rollout] = []
    factory = _ttc_env_factory(index_path, client, task_cfg, sink)
    config = ttc_mod.VgsConfig(k_candidates=k, n_trees=trees, aggregation=agg)
    outcome = ttc_mod.vgs_search(
        task_cfg["prompt"],
        config,
        value_model,
        factory,
        client,
        prompt_id=task_cfg["task_id"],
        concurrency=concurrency,
    )
    write_jsonl(out, (r.to_record() for r in outcome.tree_rollouts))
    _emit_manifest(
        "ttc vgs",
        ctx.obj["seed"],
        {"k": k, "trees": trees, "agg": agg},
        [task_path, index_path, script_path, values_path],
        [out],
        started,
    )
    click.echo(json.dumps({"final_answer": outcome.answer, "method": outcome.method}))


# --- synth -----------------------------------------------------------------------------


@cli.group(name="synth")
def synth_group() -> None:
    """Synthetic QA generation and cleanup."""


@synth_group.command(name="run")
@click.option("--seed", "seed_cfg_path", required=True, help="Synthesis seed config JSON.")
@click.option("--index", "index_path", required=True)
@click.option("--script", "script_path", required=True)
@click.option("--k", type=int, default=5, show_default=True)
@click.option("--out", required=True, help="Candidate QA pairs, JSONL.")
@click.pass_context
def synth_run_cmd(
    ctx: click.Context, seed_cfg_path: str, index_path: str, script_path: str, k: int, out: str
) -> None:
    """Run the synthesis agent once and write validated candidates."""
    started = _now()
    cfg = _load_json(seed_cfg_path, "--seed")
    few_shots = _cfg(cfg, "few_shot_examples", "seed")
    if not isinstance(few_shots, list) or not few_shots:
        raise ConfigError("few_shot_examples must be a nonempty list of [question, answer] pairs", "seed.few_shot_examples")
    try:
        seed_obj = datapipe_mod.SynthSeed(
            few_shot_examples=tuple((q, a) for q, a in few_shots),
            seed_documents=tuple(cfg.get("seed_documents", [])),
            max_steps=int(cfg.get("max_steps", 50)),
            candidates_per_prompt=int(cfg.get("candidates_per_prompt", 8)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "seed") from exc
    client = _load_script(script_path, "--script")
    index, provider = _load_vector_index(index_path, "--index")

    def factory() -> Environment:
        task = TaskSpec(task_id="synth", retrieval_k=k, max_steps=seed_obj.max_steps)
        return Environment(task=task, tools={TOOL_NAME: SearchTool(index, provider, k)})

    result = datapipe_mod.synthesize_qa(seed_obj, factory, client)
    write_jsonl(out, (c.to_record() for c in result.candidates))
    _emit_manifest(
        "synth run",
        ctx.obj["seed"],
        {"k": k},
        [seed_cfg_path, index_path, script_path],
        [out],
        started,
    )
    click.echo(
        json.dumps(
            {
                "candidates": len(result.candidates),
                "malformed": result.malformed,
                "citation_failures": result.citation_failures,
                "parse_error": result.parse_error,
            }
        )
    )


@synth_group.command(name="dedup")
@click.option("--candidates", "candidates_path", required=True, help="Candidate QA JSONL.")
@click.option("--eval", "eval_path", required=True, help="Evaluation set JSONL ({question, answer?}).")
@click.option("--top-m", type=int, default=20, show_default=True, help="Near-dedup neighborhood size.")
@click.option("--script", "script_path", default=None, help="Paraphrase-judge script; omit for exact dedup only.")
@click.option("--style", type=click.Choice(["trec", "bcp"]), default="trec", show_default=True)
@click.option("--dim", type=int, default=256, show_default=True)
@click.option("--out", required=True, help="Surviving candidates, JSONL.")
@click.pass_context
def synth_dedup_cmd(
    ctx: click.Context,
    candidates_path: str,
    eval_path: str,
    top_m: int,
    script_path: str | None,
    style: str,
    dim: int,
    out: str,
) -> None:
    """Exact dedup, then (with a judge script) embedding-gated near dedup."""
    started = _now()
    candidates = [
        datapipe_mod.SyntheticQA.from_record(rec)
        for rec in _read_jsonl(candidates_path, "--candidates")
    ]
    eval_records = _read_jsonl(eval_path, "--eval")
    eval_questions = [_cfg(rec, "question", f"eval[{i}]") for i, rec in enumerate(eval_records)]
    eval_answers = [rec.get("answer", "") for rec in eval_records]
    exact = datapipe_mod.dedup_exact(
        candidates,
        eval_questions,
        eval_answers if style == "bcp" else (),
    )
    stages = [
        datapipe_mod.StageReport(
            "exact_dedup",
            len(candidates),
            len(exact.survivors),
            _removal_counts(exact.removed),
        )
    ]
    survivors = exact.survivors
    quarantined = 0
    if script_path is not None:
        client = _load_script(script_path, "--script")
        judge = Judge(client, load_template(f"dedup_{style}.txt"))
        provider = HashEmbedder(dimension=dim, seed=ctx.obj["seed"])
        near = datapipe_mod.dedup_near(
            survivors,
            eval_questions,
            top_m,
            judge,
            provider,
            eval_answers=eval_answers if style == "bcp" else None,
        )
        stages.append(
            datapipe_mod.StageReport(
                "near_dedup",
                len(survivors),
                len(near.survivors),
                _removal_counts(near.removed),
            )
        )
        survivors = near.survivors
        quarantined = len(near.quarantined)
    report = datapipe_mod.pipeline_report(stages)
    report["quarantined"] = quarantined
    write_jsonl(out, (c.to_record() for c in survivors))
    report_path = f"{out}.report.json"
    Path(report_path).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    inputs = [candidates_path, eval_path] + ([script_path] if script_path else [])
    _emit_manifest(
        "synth dedup",
        ctx.obj["seed"],
        {"top_m": top_m, "style": style, "dim": dim},
        inputs,
        [out, report_path],
        started,
    )
    click.echo(json.dumps(report))


def _removal_counts(removals) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in removals:
        counts[r.reason] = counts.get(r.reason, 0) + 1
    return counts


@synth_group.command(name="quality")
@click.option("--items", "items_path", required=True, help="JSONL: {question, attempts: [{text, score}], ground_truth? | nuggets?}.")
@click.option("--script", "script_path", required=True, help="Quality-judge script.")
@click.option("--style", type=click.Choice(["trec", "bcp"]), default="bcp", show_default=True)
@click.option("--out", required=True, help="Verdicts JSONL.")
@click.pass_context
def synth_quality_cmd(
    ctx: click.Context, items_path: str, script_path: str, style: str, out: str
) -> None:
    """Judge mixed-success questions for ambiguity / wrong ground truth."""
    started = _now()
    items = _read_jsonl(items_path, "--items")
    client = _load_script(script_path, "--script")
    judge = Judge(client, load_template(f"quality_{style}.txt"))
    records = []
    kept = 0
    for i, item in enumerate(items):
        question = _cfg(item, "question", f"items[{i}]")
        raw_attempts = _cfg(item, "attempts", f"items[{i}]")
        attempts = [
            datapipe_mod.Attempt(text=a["text"], score=float(a["score"])) for a in raw_attempts
        ]
        verdict = datapipe_mod.quality_filter(
            question,
            attempts,
            judge,
            ground_truth=item.get("ground_truth"),
            nuggets=item.get("nuggets"),
        )
        kept += 1 if verdict.valid else 0
        records.append(
            {"question": question, "valid": verdict.valid, "reasoning": verdict.reasoning}
        )
    write_jsonl(out, records)
    _emit_manifest(
        "synth quality",
        ctx.obj["seed"],
        {"style": style},
        [items_path, script_path],
        [out],
        started,
    )
    click.echo(json.dumps({"items": len(records), "valid": kept, "invalid": len(records) - kept}))


# --- oapl ------------------------------------------------------------------------------


@cli.group(name="oapl")
def oapl_group() -> None:
    """Off-policy training data."""


@oapl_group.command(name="build")
@click.option("--groups", "groups_path", required=True, help="Groups JSONL, or flat rollout JSONL.")
@click.option("--beta1", type=float, required=True, help="V* smoothness; no default by design.")
@click.option("--beta2", type=float, required=True, help="KL strength; no default by design.")
@click.option("--binarize", type=float, default=None, help="Binarization threshold for pass-rate filtering.")
@click.option("--round", "round_index", type=int, default=0, show_default=True)
@click.option("--source-model", default="", help="Model tag recorded on every pair.")
@click.option("--out", required=True, help="Training dataset JSONL.")
@click.pass_context
def oapl_build_cmd(
    ctx: click.Context,
    groups_path: str,
    beta1: float,
    beta2: float,
    binarize: float | None,
    round_index: int,
    source_model: str,
    out: str,
) -> None:
    """Filter groups and expand rollouts into training pairs."""
    started = _now()
    if not Path(groups_path).is_file():
        raise ConfigError(f"file not found: {groups_path}", "--groups")
    try:
        betas = Betas(beta1, beta2)
    except ValueError as exc:
        raise ConfigError(str(exc), "--beta1/--beta2") from exc
    groups = oapl_mod.load_groups(groups_path)
    result = oapl_mod.filter_groups(groups, binarize)
    records = oapl_mod.build_dataset(result.kept, betas, round_index, source_model)
    write_jsonl(out, records)
    _emit_manifest(
        "oapl build",
        ctx.obj["seed"],
        {
            "beta1": beta1,
            "beta2": beta2,
            "binarize": binarize,
            "round": round_index,
            "source_model": source_model,
        },
        [groups_path],
        [out],
        started,
    )
    click.echo(
        json.dumps(
            {
                "groups_in": len(groups),
                "groups_kept": len(result.kept),
                "removed_solved": len(result.removed_solved),
                "removed_unsolved": len(result.removed_unsolved),
                "pairs": len(records),
            }
        )
    )


# --- eval ------------------------------------------------------------------------------


@cli.group(name="eval")
def eval_group() -> None:
    """Scoring and reference preparation."""


@eval_group.command(name="score")
@click.option("--rollouts", "rollouts_path", required=True)
@click.option("--refs", "refs_path", required=True, help="JSONL: {task_id, kind, answer? | nuggets?}.")
@click.option("--script", "script_path", default=None, help="Judge script (required for nugget refs).")
@click.option("--out", required=True, help="Scores JSONL ({task_id, reward}).")
@click.pass_context
def eval_score_cmd(
    ctx: click.Context, rollouts_path: str, refs_path: str, script_path: str | None, out: str
) -> None:
    """Score logged rollouts against reference answers or nuggets."""
    started = _now()
    rollouts = [Rollout.from_record(rec) for rec in _read_jsonl(rollouts_path, "--rollouts")]
    refs = _read_jsonl(refs_path, "--refs")
    client = _load_script(script_path, "--script") if script_path else None
    registry = RewardRegistry()
    for i, ref in enumerate(refs):
        cfg = {k: v for k, v in ref.items() if k != "task_id"}
        judge = None
        if cfg.get("kind") in ("nugget", "single_nugget"):
            if client is None:
                raise ConfigError("nugget scoring needs --script", f"refs[{i}].kind")
            judge = Judge(client, load_template("nugget_judge.txt"))
        try:
            registry.register(_cfg(ref, "task_id", f"refs[{i}]"), spec_from_config(cfg, judge))
        except (ValueError, DelveError) as exc:
            raise ConfigError(str(exc), f"refs[{i}]") from exc
    records = []
    for r in rollouts:
        reward = float(registry.evaluate(group_key(r.task_id), r))
        records.append({"task_id": r.task_id, "reward": reward})
    write_jsonl(out, records)
    inputs = [rollouts_path, refs_path] + ([script_path] if script_path else [])
    _emit_manifest("eval score", ctx.obj["seed"], {}, inputs, [out], started)
    mean = sum(rec["reward"] for rec in records) / len(records) if records else 0.0
    click.echo(json.dumps({"rollouts": len(records), "mean_reward": round(mean, 6)}))


@eval_group.command(name="nuggetize")
@click.option("--items", "items_path", required=True, help="JSONL: {question, reference}.")
@click.option("--script", "script_path", required=True, help="Nuggetizer judge script.")
@click.option("--out", required=True, help="JSONL: {question, nuggets}.")
@click.pass_context
def eval_nuggetize_cmd(ctx: click.Context, items_path: str, script_path: str, out: str) -> None:
    """Decompose free-text references into nugget lists."""
    started = _now()
    items = _read_jsonl(items_path, "--items")
    client = _load_script(script_path, "--script")
    judge = Judge(client, load_template("nuggetize.txt"))
    records = []
    for i, item in enumerate(items):
        question = _cfg(item, "question", f"items[{i}]")
        reference = _cfg(item, "reference", f"items[{i}]")
        nuggets = nuggetize(question, reference, judge)
        records.append({"question": question, "nuggets": list(nuggets.nuggets)})
    write_jsonl(out, records)
    _emit_manifest("eval nuggetize", ctx.obj["seed"], {}, [items_path, script_path], [out], started)
    click.echo(json.dumps({"items": len(records)}))


# --- analyze ---------------------------------------------------------------------------


@cli.group(name="analyze")
def analyze_group() -> None:
    """Trajectory behavior and statistics."""


@analyze_group.command(name="classify")
@click.option("--rollouts", "rollouts_path", required=True)
@click.option("--threshold-chars", type=int, default=150_000, show_default=True)
@click.option("--out", required=True, help="Labels JSONL.")
@click.pass_context
def analyze_classify_cmd(
    ctx: click.Context, rollouts_path: str, threshold_chars: int, out: str
) -> None:
    """Label every rollout with its search-behavior category."""
    started = _now()
    rollouts = [Rollout.from_record(rec) for rec in _read_jsonl(rollouts_path, "--rollouts")]
    records = []
    labels = []
    for r in rollouts:
        features = analysis_mod.extract_features(r, threshold_chars=threshold_chars)
        label = analysis_mod.classify(features)
        labels.append(label)
        records.append(
            {
                "task_id": r.task_id,
                "category": label.category,
                "rule": label.rule_matched,
                "borderline": label.borderline,
            }
        )
    write_jsonl(out, records)
    _emit_manifest(
        "analyze classify",
        ctx.obj["seed"],
        {"threshold_chars": threshold_chars},
        [rollouts_path],
        [out],
        started,
    )
    click.echo(json.dumps(analysis_mod.label_distribution(labels)))


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


@analyze_group.command(name="stats")
@click.option("--metric", type=click.Choice(["diversity", "recall", "transition", "maxk", "efficiency"]), required=True)
@click.option("--rollouts", "rollouts_path", default=None, help="Rollout JSONL (diversity, recall, maxk, efficiency).")
@click.option("--gold", "gold_path", default=None, help="JSONL: {task_id, doc_ids} (recall, efficiency).")
@click.option("--before", "before_path", default=None, help="Rollout/groups JSONL (transition).")
@click.option("--after", "after_path", default=None, help="Rollout/groups JSONL (transition).")
@click.option("--cap", type=int, default=None, help="Query cap (diversity; default: 90th percentile).")
@click.option("--ks", default="1,2,4,8", show_default=True, help="Comma-separated k values (maxk).")
@click.option("--k", "passk_k", type=int, default=None, help="Attempts per group to consider (transition).")
@click.option("--threshold", type=float, default=0.5, show_default=True, help="Correctness threshold (transition).")
@click.option("--out", required=True, help="CSV table.")
@click.pass_context
def analyze_stats_cmd(
    ctx: click.Context,
    metric: str,
    rollouts_path: str | None,
    gold_path: str | None,
    before_path: str | None,
    after_path: str | None,
    cap: int | None,
    ks: str,
    passk_k: int | None,
    threshold: float,
    out: str,
) -> None:
    """Compute one trajectory statistic and write its CSV table."""
    started = _now()
    inputs: list[str] = []
    summary: dict[str, Any]

    def need(value: str | None, flag: str) -> str:
        if value is None:
            raise ConfigError(f"--metric {metric} requires {flag}", flag)
        return value

    def load_rollouts(path: str, flag: str) -> list[Rollout]:
        inputs.append(path)
        return [Rollout.from_record(rec) for rec in _read_jsonl(path, flag)]

    def load_gold(path: str) -> dict[str, set[str]]:
        inputs.append(path)
        return {
            _cfg(rec, "task_id", f"gold[{i}]"): set(_cfg(rec, "doc_ids", f"gold[{i}]"))
            for i, rec in enumerate(_read_jsonl(path, "--gold"))
        }

    if metric == "diversity":
        rollouts = load_rollouts(need(rollouts_path, "--rollouts"), "--rollouts")
        query_cap = cap if cap is not None else analysis_mod.p90_query_cap([rollouts])
        curve = analysis_mod.search_diversity(rollouts, query_cap)
        _write_csv(out, ["query_index", "mean_unique_docs"], [(i + 1, v) for i, v in enumerate(curve)])
        summary = {"metric": metric, "query_cap": query_cap, "final_mean_unique_docs": curve[-1]}
    elif metric == "recall":
        rollouts = load_rollouts(need(rollouts_path, "--rollouts"), "--rollouts")
        gold = load_gold(need(gold_path, "--gold"))
        buckets = analysis_mod.recall_conditioned_accuracy(rollouts, gold)
        _write_csv(
            out,
            ["bucket", "n", "accuracy"],
            [(name, b["n"], b["accuracy"]) for name, b in buckets.items()],
        )
        summary = {"metric": metric, **{name: b for name, b in buckets.items()}}
    elif metric == "transition":

        def load_side(path: str | None, flag: str):
            checked = need(path, flag)
            if not Path(checked).is_file():
                raise ConfigError(f"file not found: {checked}", flag)
            inputs.append(checked)
            return oapl_mod.load_groups(checked)

        before = load_side(before_path, "--before")
        after = load_side(after_path, "--after")
        result = analysis_mod.passk_transition(before, after, k=passk_k, threshold=threshold)
        rows = [
            [state] + [result["matrix"][i][j] for j in range(3)]
            for i, state in enumerate(result["states"])
        ]
        _write_csv(out, ["from_state"] + [f"to_{s}" for s in result["states"]], rows)
        summary = {"metric": metric, "matched_groups": result["matched_groups"], "counts": result["counts"]}
    elif metric == "maxk":
        rollouts = load_rollouts(need(rollouts_path, "--rollouts"), "--rollouts")
        groups = oapl_mod.group_rollouts(rollouts)
        try:
            k_values = [int(x) for x in ks.split(",") if x.strip()]
            curve_by_k = analysis_mod.maxk_curve([g.rewards for g in groups], k_values)
        except ValueError as exc:
            raise ConfigError(str(exc), "--ks") from exc
        _write_csv(out, ["k", "mean_max_at_k"], sorted(curve_by_k.items()))
        summary = {"metric": metric, "groups": len(groups), "maxk": {str(k): v for k, v in curve_by_k.items()}}
    else:  # efficiency
        rollouts = load_rollouts(need(rollouts_path, "--rollouts"), "--rollouts")
        gold = load_gold(need(gold_path, "--gold"))
        eff = analysis_mod.search_efficiency(rollouts, gold)
        _write_csv(
            out,
            ["n_rollouts", "n_full_recall", "mean_searches_to_full_recall", "mean_searches_after_full_recall"],
            [
                (
                    eff["n_rollouts"],
                    eff["n_full_recall"],
                    eff["mean_searches_to_full_recall"],
                    eff["mean_searches_after_full_recall"],
                )
            ],
        )
        summary = {"metric": metric, **eff}

    _emit_manifest(f"analyze stats {metric}", ctx.obj["seed"], {"metric": metric}, inputs, [out], started)
    click.echo(json.dumps(summary))


# --- entry point -------------------------------------------------------------------------


def main(argv: Sequence[str] | None = None) -> int:
    """Programmatic entry point: returns an exit code instead of raising."""
    try:
        result = cli.main(args=argv, standalone_mode=False, obj={})
        return int(result) if isinstance(result, int) else 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 130
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except DelveError as exc:
        record: dict[str, Any] = {"error": type(exc).__name__, "message": str(exc)}
        key_path = getattr(exc, "key_path", "")
        if key_path:
            record["key_path"] = key_path
        click.echo(json.dumps(record), err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
