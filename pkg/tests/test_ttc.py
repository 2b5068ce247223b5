"""Parallel thinking, value-guided search, aggregation voting, and the
value-model training target pipeline.

The search tests lean on the record/replay pattern: variant markers must make
every sibling request distinguishable, or the ScriptedClient replay would die
with a fingerprint collision.
"""

import math

import numpy as np
import pytest

import oracles
from conftest import (
    SequenceClient,
    answer_step,
    answer_text,
    assistant_msg,
    make_env,
    make_rollout,
    record_and_replay,
    rollout_records_equal,
    run_plan,
    search_step,
    tool_msg,
)
from delve.core import ANSWER_MARKER, Message, render_messages
from delve.environment import GatewayAgent, run_rollout
from delve.gateway import GatewayError, Sampling, ScriptMiss, ScriptedClient, text_response
from delve.ttc import (
    AlignmentMismatch,
    AllRolloutsFailed,
    LogisticValueModel,
    NoAnswers,
    NonBinaryReward,
    ParallelThinkingConfig,
    ScriptedValueModel,
    ValueTrainingExample,
    VgsConfig,
    aggregate,
    build_value_examples,
    format_candidate_answers,
    parallel_think,
    render_prefix,
    value_ce_loss,
    vgs_rollout,
    vgs_search,
)


# --- render_prefix -------------------------------------------------------------------


def test_render_prefix_matches_manual_rendering():
    r = make_rollout(prompt="who wrote it?", steps=[assistant_msg("thinking")], system_prompt="be terse")
    manual = render_messages(
        [
            Message(role="system", content="be terse"),
            Message(role="user", content="who wrote it?"),
            Message(role="assistant", content="thinking"),
        ]
    )
    got = render_prefix(r)
    assert got.text == manual.text
    assert got.policy_spans == manual.policy_spans


def test_render_prefix_extra_extends_text():
    r = make_rollout(steps=[assistant_msg("step one")])
    base = render_prefix(r).text
    longer = render_prefix(r, [assistant_msg("tentative continuation")]).text
    assert longer.startswith(base)
    assert "tentative continuation" in longer
    assert "tentative continuation" not in base


def test_render_prefix_keeps_empty_system_frame():
    # the frame is always two messages, even when both are short, so value
    # scores at train and search time see identical layouts
    r = make_rollout(prompt="q", system_prompt="")
    manual = render_messages([Message(role="system", content=""), Message(role="user", content="q")])
    assert render_prefix(r).text == manual.text


# --- parallel thinking config and formatting ------------------------------------------


def test_parallel_config_rejects_bad_n():
    with pytest.raises(ValueError):
        ParallelThinkingConfig(n_rollouts=0)


def test_parallel_config_requires_placeholders():
    with pytest.raises(ValueError):
        ParallelThinkingConfig(n_rollouts=2, aggregator_template="question: {question}")
    with pytest.raises(ValueError):
        ParallelThinkingConfig(n_rollouts=2, aggregator_template="answers: {candidate_answers}")
    cfg = ParallelThinkingConfig(
        n_rollouts=2, aggregator_template="{question} vs {candidate_answers}"
    )
    assert cfg.n_rollouts == 2


def test_format_candidate_answers_numbering():
    assert format_candidate_answers(["Paris", "Rome"]) == "1. Paris\n2. Rome"
    assert format_candidate_answers([]) == "(no candidate answers were produced)"


# --- parallel thinking runs ------------------------------------------------------------


def _sinking_factory(index, provider, sink, **kwargs):
    def factory():
        return make_env(index, provider, result_sink=sink.append, **kwargs)

    return factory


def test_parallel_think_three_candidates(mini_index):
    index, provider = mini_index
    cfg = ParallelThinkingConfig(n_rollouts=3)
    plan = [
        answer_step("Lynda Barry", 90),
        answer_step("lynda barry", 70),
        search_step("freddie stories author"),
        answer_step("Barry", 60),
        search_step("verify freddie stories", "a1"),
        answer_step("Lynda Barry", 95),
    ]

    def run(client):
        sink = []
        agg = parallel_think(
            "Who wrote The Freddie Stories?",
            cfg,
            _sinking_factory(index, provider, sink),
            client,
            prompt_id="fs",
        )
        return agg, sink

    (agg_a, sink_a), (agg_b, sink_b), _ = record_and_replay(plan, run)
    assert rollout_records_equal(agg_a, agg_b)
    assert [r.task_id for r in sink_a] == ["fs/cand0", "fs/cand1", "fs/cand2", "fs/agg"]
    assert [r.task_id for r in sink_a] == [r.task_id for r in sink_b]
    assert agg_a.task_id == "fs/agg"
    assert agg_a.final_answer == "Lynda Barry"
    # the aggregation prompt lists the short answers in candidate order and
    # repeats the original question, never the trajectories
    assert "1. Lynda Barry\n2. lynda barry\n3. Barry" in agg_a.prompt
    assert "Who wrote The Freddie Stories?" in agg_a.prompt
    assert "freddie stories author" not in agg_a.prompt


def test_parallel_think_variant_markers_in_requests_only(mini_index):
    index, provider = mini_index
    plan = [
        answer_step("A", 90),
        answer_step("B", 80),
        search_step("check"),
        answer_step("C", 70),
        answer_step("A", 95),
    ]
    client = SequenceClient(plan)
    sink = []
    agg = parallel_think(
        "q?", ParallelThinkingConfig(n_rollouts=3), _sinking_factory(index, provider, sink), client
    )
    markers = [
        m.content
        for req in client.requests
        for m in req.messages
        if m.content.startswith("(sample ")
    ]
    # candidate 0 and the aggregator are unmarked; candidate 2 made two calls
    assert markers == ["(sample p1)", "(sample p2)", "(sample p2)"]
    for rollout in sink + [agg]:
        assert all("(sample " not in m.content for m in rollout.steps)


def test_parallel_think_n1_candidate_request_matches_plain_rollout(mini_index):
    index, provider = mini_index
    plan = [answer_step("Siku Njema", 88), answer_step("Siku Njema", 90)]
    client = SequenceClient(plan)
    parallel_think(
        "epic swahili novel?",
        ParallelThinkingConfig(n_rollouts=1),
        _sinking_factory(index, provider, []),
        client,
    )
    plain_client = SequenceClient([answer_step("Siku Njema", 88)])
    env = make_env(index, provider)
    run_rollout(env, GatewayAgent(plain_client, Sampling()), "epic swahili novel?")
    from delve.gateway import request_fingerprint

    assert request_fingerprint(client.requests[0]) == request_fingerprint(plain_client.requests[0])


def test_parallel_think_aggregator_keeps_tools_by_default(mini_index):
    index, provider = mini_index
    plan = [answer_step("x"), answer_step("x")]
    client = SequenceClient(plan)
    parallel_think(
        "q?", ParallelThinkingConfig(n_rollouts=1), _sinking_factory(index, provider, []), client
    )
    agg_request = client.requests[-1]
    assert len(agg_request.available_tools) == 1


def test_parallel_think_aggregator_tools_disabled(mini_index):
    index, provider = mini_index
    plan = [answer_step("x"), answer_step("x")]
    client = SequenceClient(plan)
    parallel_think(
        "q?",
        ParallelThinkingConfig(n_rollouts=1, aggregator_tools_enabled=False),
        _sinking_factory(index, provider, []),
        client,
    )
    assert client.requests[-1].available_tools == ()


def test_parallel_think_strict_raises_when_no_answers(mini_index):
    index, provider = mini_index
    dead = [text_response("ran out", finish_reason="length")] * 2
    with pytest.raises(AllRolloutsFailed):
        parallel_think(
            "q?",
            ParallelThinkingConfig(n_rollouts=2),
            _sinking_factory(index, provider, []),
            SequenceClient(dead),
            strict=True,
        )


def test_parallel_think_lenient_notes_empty_candidates(mini_index):
    index, provider = mini_index
    plan = [
        text_response("ran out", finish_reason="length"),
        answer_step("recovered", 50),
    ]
    client = SequenceClient(plan)
    agg = parallel_think(
        "q?", ParallelThinkingConfig(n_rollouts=1), _sinking_factory(index, provider, []), client
    )
    assert "(no candidate answers were produced)" in agg.prompt
    assert agg.final_answer == "recovered"


# --- value models -----------------------------------------------------------------------


def test_scripted_value_longest_key_wins():
    vm = ScriptedValueModel({"ab": 0.3, "abcd": 0.9}, default=0.2)
    assert vm.score("q", "xx abcd yy") == 0.9
    assert vm.score("q", "xx ab yy") == 0.3
    assert vm.score("q", "nothing matches") == 0.2


def test_scripted_value_validates_range():
    with pytest.raises(ValueError):
        ScriptedValueModel({"k": 1.0})
    with pytest.raises(ValueError):
        ScriptedValueModel({"k": 0.0})
    with pytest.raises(ValueError):
        ScriptedValueModel({}, default=1.5)


def test_logistic_value_in_unit_interval_and_likes_answers():
    vm = LogisticValueModel()
    plain = vm.score("q", "some partial text")
    answered = vm.score("q", f"some partial text {ANSWER_MARKER} Paris")
    assert 0.0 < plain < 1.0
    assert 0.0 < answered < 1.0
    assert answered > plain


# --- value-guided search ------------------------------------------------------------------


def test_vgs_config_validation():
    with pytest.raises(ValueError):
        VgsConfig(k_candidates=0)
    with pytest.raises(ValueError):
        VgsConfig(n_trees=0)
    with pytest.raises(ValueError):
        VgsConfig(aggregation="plurality")
    assert VgsConfig().aggregation == "mv"


def test_vgs_k1_byte_identical_to_plain_rollout(mini_index):
    index, provider = mini_index
    plan = [search_step("picture book baby"), answer_step("Baby", 91)]
    recorder = SequenceClient(plan)
    env = make_env(index, provider)
    base = run_rollout(env, GatewayAgent(recorder, Sampling()), "which book?", rollout_id="t1")
    assert not recorder.queue

    # replay the recorded script through the search path; any deviation in the
    # requests (a stray marker, reordered tools) would raise ScriptMiss
    scripted = recorder.to_scripted()
    searched = vgs_rollout(
        "which book?",
        VgsConfig(k_candidates=1),
        ScriptedValueModel(),
        lambda: make_env(index, provider),
        scripted,
        rollout_id="t1",
    )
    assert rollout_records_equal(base, searched)


def test_vgs_k2_scripted_value_model_picks_better_branch(mini_index):
    index, provider = mini_index
    vm = ScriptedValueModel(
        {
            "path B": 0.7,
            "Exact Answer: X": 0.8,
            "Exact Answer: Y": 0.65,
        },
        default=0.5,
    )
    plan = [
        text_response("path A"),  # step 1, candidate 0
        text_response("path B"),  # step 1, candidate 1 (wins: 0.7 > 0.5)
        answer_step("X"),  # step 2, candidate 0 (wins: 0.8 > 0.65)
        answer_step("Y"),  # step 2, candidate 1
    ]

    def run(client):
        return vgs_rollout(
            "q?", VgsConfig(k_candidates=2), vm, lambda: make_env(index, provider), client
        )

    first, second, _ = record_and_replay(plan, run)
    assert rollout_records_equal(first, second)
    assert [m.content for m in first.steps] == ["path B", answer_text("X")]
    assert first.final_answer == "X"
    assert not first.truncated


def test_vgs_branch_markers_per_candidate(mini_index):
    index, provider = mini_index
    plan = [answer_step("A"), answer_step("B")]
    client = SequenceClient(plan)
    vgs_rollout(
        "q?", VgsConfig(k_candidates=2), ScriptedValueModel(), lambda: make_env(index, provider), client
    )
    lasts = [req.messages[-1].content for req in client.requests]
    assert lasts == ["q?", "(sample b1)"]


def test_vgs_tree_index_prefixes_tags(mini_index):
    index, provider = mini_index
    plan = [answer_step("A"), answer_step("B")]
    client = SequenceClient(plan)
    vgs_rollout(
        "q?",
        VgsConfig(k_candidates=2),
        ScriptedValueModel(),
        lambda: make_env(index, provider),
        client,
        tree_index=1,
    )
    lasts = [req.messages[-1].content for req in client.requests]
    assert lasts == ["(sample t1)", "(sample t1b1)"]


def test_vgs_tie_keeps_first_candidate(mini_index):
    index, provider = mini_index
    plan = [answer_step("first"), answer_step("second")]
    rollout = vgs_rollout(
        "q?",
        VgsConfig(k_candidates=2),
        ScriptedValueModel(),  # both candidates score the default
        lambda: make_env(index, provider),
        SequenceClient(plan),
    )
    assert rollout.final_answer == "first"


class _FlakyClient:
    """Delegates to a plan but fails any request carrying a given marker."""

    def __init__(self, responses, poison):
        self.inner = SequenceClient(responses)
        self.poison = poison

    def generate(self, request):
        if request.messages[-1].content == self.poison:
            raise GatewayError("backend dropped the call")
        return self.inner.generate(request)


def test_vgs_candidate_failure_shrinks_the_set(mini_index):
    index, provider = mini_index
    client = _FlakyClient([answer_step("survivor")], poison="(sample b1)")
    rollout = vgs_rollout(
        "q?", VgsConfig(k_candidates=2), ScriptedValueModel(), lambda: make_env(index, provider), client
    )
    assert rollout.final_answer == "survivor"
    assert not rollout.truncated


class _DeadClient:
    def generate(self, request):
        raise GatewayError("backend down")


def test_vgs_all_candidates_failing_truncates(mini_index):
    index, provider = mini_index
    rollout = vgs_rollout(
        "q?", VgsConfig(k_candidates=3), ScriptedValueModel(), lambda: make_env(index, provider), _DeadClient()
    )
    assert rollout.truncated
    assert rollout.termination_reason.startswith("gateway_failure")
    assert rollout.final_answer is None


def test_vgs_script_miss_propagates(mini_index):
    index, provider = mini_index
    with pytest.raises(ScriptMiss):
        vgs_rollout(
            "q?",
            VgsConfig(k_candidates=2),
            ScriptedValueModel(),
            lambda: make_env(index, provider),
            ScriptedClient({}),
        )


def test_vgs_search_votes_across_trees(mini_index):
    index, provider = mini_index
    plan = [
        answer_step("Paris", 90),  # tree0
        answer_step("paris!", 60),  # tree1 (same class as tree0)
        answer_step("Rome", 95),  # tree2
    ]

    def run(client):
        sink = []
        outcome = vgs_search(
            "capital?",
            VgsConfig(k_candidates=1, n_trees=3, aggregation="mv"),
            ScriptedValueModel(),
            _sinking_factory(index, provider, sink),
            client,
            prompt_id="cap",
        )
        return outcome, sink

    (out_a, sink_a), (out_b, _), _ = record_and_replay(plan, run)
    assert out_a.method == "mv"
    assert [r.task_id for r in out_a.tree_rollouts] == ["cap/tree0", "cap/tree1", "cap/tree2"]
    # majority class {paris} wins and the earliest member's verbatim answer is kept
    assert out_a.answer == "Paris"
    assert out_b.answer == "Paris"
    assert [r.task_id for r in sink_a] == ["cap/tree0", "cap/tree1", "cap/tree2"]


# --- aggregation voting -----------------------------------------------------------------


def _answered(task_id, marker_text, answer):
    return make_rollout(
        task_id=task_id,
        prompt="q",
        steps=[assistant_msg(marker_text), assistant_msg(answer_text(answer))],
        final_answer=answer,
    )


def test_aggregate_mv_matches_oracle():
    rollouts = [
        _answered("r0", "s0", "Paris"),
        _answered("r1", "s1", "paris!"),
        _answered("r2", "s2", "Rome"),
    ]
    labels = ["paris", "paris", "rome"]
    winner = oracles.vote_winner(labels, [1.0, 1.0, 1.0], "mv")
    assert aggregate(rollouts, "mv") == rollouts[winner].final_answer == "Paris"


def test_aggregate_wmv_weights_flip_the_vote():
    rollouts = [
        _answered("r0", "alpha path", "A"),
        _answered("r1", "beta path", "B"),
    ]
    vm = ScriptedValueModel({"alpha path": 0.4, "beta path": 0.9})
    assert aggregate(rollouts, "wmv", vm) == "B"
    assert oracles.vote_winner(["a", "b"], [0.4, 0.9], "wmv") == 1
    # same two rollouts under plain majority: tie resolves to the earlier one
    assert aggregate(rollouts, "mv") == "A"


def test_aggregate_bon_takes_single_best():
    rollouts = [
        _answered("r0", "alpha path", "A"),
        _answered("r1", "beta path", "B"),
        _answered("r2", "gamma path", "C"),
    ]
    vm = ScriptedValueModel({"alpha path": 0.4, "beta path": 0.9, "gamma path": 0.6})
    assert aggregate(rollouts, "bon", vm) == "B"
    assert oracles.vote_winner([], [0.4, 0.9, 0.6], "bon") == 1


def test_aggregate_bon_tie_keeps_earliest():
    rollouts = [_answered("r0", "alpha path", "A"), _answered("r1", "beta path", "B")]
    vm = ScriptedValueModel({"alpha path": 0.7, "beta path": 0.7})
    assert aggregate(rollouts, "bon", vm) == "A"


def test_aggregate_weighted_methods_require_value_model():
    rollouts = [_answered("r0", "s", "A")]
    for method in ("wmv", "bon"):
        with pytest.raises(ValueError):
            aggregate(rollouts, method)
    assert aggregate(rollouts, "mv") == "A"


def test_aggregate_rejects_unknown_method():
    with pytest.raises(ValueError):
        aggregate([_answered("r0", "s", "A")], "plurality")


def test_aggregate_no_answers():
    silent = make_rollout(task_id="r0", steps=[assistant_msg("no idea")])
    with pytest.raises(NoAnswers):
        aggregate([silent], "mv")


def test_aggregate_extracts_answer_from_steps_when_field_unset():
    r = make_rollout(task_id="r0", steps=[assistant_msg(answer_text("Willis Tower", 80))])
    assert r.final_answer is None
    assert aggregate([r], "mv") == "Willis Tower"


def test_aggregate_returns_earliest_verbatim_member():
    rollouts = [
        _answered("r0", "s0", "PARIS"),
        _answered("r1", "s1", "paris"),
        _answered("r2", "s2", "rome"),
    ]
    assert aggregate(rollouts, "mv") == "PARIS"


# --- value training targets ----------------------------------------------------------------


def test_value_example_record_round_trip():
    ex = ValueTrainingExample(prompt="q", text="abcdef", mask_spans=((1, 3), (4, 6)), reward=1)
    back = ValueTrainingExample.from_record(ex.to_record())
    assert back == ex
    assert ex.masked_char_count() == 4


def test_build_value_examples_masks_policy_text_only(mini_index):
    index, provider = mini_index
    plan = [search_step("lynda barry"), answer_step("Lynda Barry", 90)]
    rollout = run_plan(index, provider, plan, prompt="author?")
    rollout.reward = 1.0
    (example,) = build_value_examples([rollout])

    rendered = render_prefix(rollout)
    assert example.text == rendered.text
    assert example.mask_spans == rendered.policy_spans
    assert example.reward == 1

    # tool output characters stay unmasked
    tool_content = next(m.content for m in rollout.steps if m.role == "tool")
    start = example.text.index(tool_content)
    tool_span = (start, start + len(tool_content))
    assert not any(oracles.spans_intersect(tool_span, s) for s in example.mask_spans)
    # but the answer text is masked
    answer_pos = example.text.index("Exact Answer: Lynda Barry")
    assert any(a <= answer_pos < b for a, b in example.mask_spans)


def test_build_value_examples_rejects_non_binary_rewards():
    good = make_rollout(task_id="ok", steps=[assistant_msg("x")], reward=0.0)
    for bad_reward in (0.5, None):
        bad = make_rollout(task_id="bad", steps=[assistant_msg("x")], reward=bad_reward)
        with pytest.raises(NonBinaryReward):
            build_value_examples([good, bad])
    assert len(build_value_examples([good])) == 1


# --- value CE loss ---------------------------------------------------------------------------


def test_value_ce_loss_uniform_half_is_t_ln2():
    text = "x" * 40
    ex = ValueTrainingExample(prompt="q", text=text, mask_spans=((5, 15), (20, 27)), reward=1)
    t = ex.masked_char_count()
    loss = value_ce_loss([0.5] * len(text), ex)
    assert loss == pytest.approx(t * math.log(2.0), abs=1e-9)


def test_value_ce_loss_matches_oracle():
    text = "abcdef"
    preds = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
    for reward in (0, 1):
        ex = ValueTrainingExample(prompt="q", text=text, mask_spans=((1, 3), (4, 6)), reward=reward)
        assert value_ce_loss(preds, ex) == pytest.approx(
            oracles.value_ce(preds, ex.mask_spans, reward), abs=1e-12
        )


def test_value_ce_loss_constant_minimizer_is_success_rate():
    # split a batch 3 successes / 1 failure; among constant predictors the
    # summed loss is minimized near p = 0.75
    rewards = [1, 1, 1, 0]
    examples = [
        ValueTrainingExample(prompt="q", text="yyyy", mask_spans=((0, 4),), reward=r)
        for r in rewards
    ]

    def batch_loss(p):
        return sum(value_ce_loss([p] * 4, ex) for ex in examples)

    grid = [i / 100 for i in range(1, 100)]
    best = min(grid, key=batch_loss)
    assert best == pytest.approx(0.75, abs=0.011)


def test_value_ce_loss_alignment_and_range_checks():
    ex = ValueTrainingExample(prompt="q", text="abcd", mask_spans=((0, 2),), reward=1)
    with pytest.raises(AlignmentMismatch):
        value_ce_loss([0.5, 0.5, 0.5], ex)
    with pytest.raises(AlignmentMismatch):
        value_ce_loss(np.full((2, 2), 0.5), ex)
    with pytest.raises(ValueError):
        value_ce_loss([1.0, 0.5, 0.5, 0.5], ex)
    # out-of-range values outside the mask never participate
    assert value_ce_loss([0.5, 0.5, 7.0, -3.0], ex) == pytest.approx(2 * math.log(2.0))


def test_value_ce_loss_empty_mask_is_zero():
    ex = ValueTrainingExample(prompt="q", text="abcd", mask_spans=(), reward=0)
    assert value_ce_loss([0.0, 0.0, 0.0, 0.0], ex) == 0.0
