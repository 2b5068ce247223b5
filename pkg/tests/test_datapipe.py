"""Synthesis parsing, dedup stages, quality judging, and report conservation."""

import json

import pytest

from conftest import (
    SequenceClient,
    answer_step,
    assistant_msg,
    make_env,
    make_rollout,
    search_step,
    tool_msg,
)
from delve.datapipe import (
    ATTEMPT_TRUNCATION_CHARS,
    Attempt,
    PipelineImbalance,
    Removal,
    StageReport,
    SynthSeed,
    SyntheticQA,
    build_synthesis_prompt,
    dedup_exact,
    dedup_near,
    document_coverage,
    format_attempts,
    format_few_shots,
    pipeline_report,
    quality_filter,
    retrieved_doc_ids,
    synthesize_qa,
)
from delve.gateway import text_response
from delve.oapl import GroupSample
from delve.retrieval import HashEmbedder
from delve.rewards import Judge, JudgeParseFailure
from delve.templates import load_template


# --- seed and candidate dataclasses -----------------------------------------------------


def test_synth_seed_validation():
    with pytest.raises(ValueError):
        SynthSeed(few_shot_examples=())
    with pytest.raises(ValueError):
        SynthSeed(few_shot_examples=(("q", "a"),), max_steps=0)
    with pytest.raises(ValueError):
        SynthSeed(few_shot_examples=(("q", "a"),), candidates_per_prompt=0)
    seed = SynthSeed(few_shot_examples=(("q", "a"),))
    assert seed.max_steps == 50


def test_synthetic_qa_validation_and_round_trip():
    with pytest.raises(ValueError):
        SyntheticQA(question="", answer="a")
    with pytest.raises(ValueError):
        SyntheticQA(question="q", answer="")
    broken = SyntheticQA(question="", answer="", well_formed=False)
    assert not broken.well_formed
    qa = SyntheticQA("q?", "a", citations=("d1", "d2"))
    assert SyntheticQA.from_record(json.loads(json.dumps(qa.to_record()))) == qa


def test_build_synthesis_prompt_sections():
    seed = SynthSeed(
        few_shot_examples=(("Who wrote X?", "Y"), ("Capital?", "Z")),
        seed_documents=("d3", "d7"),
        candidates_per_prompt=4,
    )
    prompt = build_synthesis_prompt(seed)
    assert "Example 1:\nQ: Who wrote X?\nA: Y" in prompt
    assert "Example 2:\nQ: Capital?\nA: Z" in prompt
    assert "Start your exploration from these seed documents: d3, d7" in prompt
    assert "up to 4 question-answer pairs" in prompt

    bare = build_synthesis_prompt(SynthSeed(few_shot_examples=(("q", "a"),)))
    assert "seed documents" not in bare


def test_format_few_shots_numbering():
    assert format_few_shots([("a?", "b")]) == "Example 1:\nQ: a?\nA: b"


def test_retrieved_doc_ids_reads_tool_outputs():
    r = make_rollout(
        steps=[
            assistant_msg("searching"),
            tool_msg("[d1#0000] score=0.9000 some text\n[d2#0003] score=0.5000 more"),
            assistant_msg("not a tool line [d9#0000] score=0.1"),
        ]
    )
    assert retrieved_doc_ids(r) == {"d1", "d2"}


# --- synthesis rollouts ---------------------------------------------------------------------


def _seed(**kwargs):
    defaults = dict(few_shot_examples=(("Who founded it?", "Someone"),))
    defaults.update(kwargs)
    return SynthSeed(**defaults)


def _run_synth(mini_index, plan, seed=None):
    index, provider = mini_index
    client = SequenceClient(plan)
    result = synthesize_qa(seed or _seed(), lambda: make_env(index, provider), client)
    assert not client.queue
    return result


def test_synthesize_qa_happy_and_failure_modes(mini_index):
    items = [
        {"question": "Who wrote The Freddie Stories?", "answer": "Lynda Barry", "citations": ["d1"]},
        {"question": "Ghost question?", "answer": "x", "citations": ["d9"]},  # never retrieved
        {"question": "No answer?", "answer": "   ", "citations": []},  # malformed
        "just a string",  # malformed
        {"question": "Publisher founded in 1986?", "answer": "Sasquatch Books", "citations": []},
    ]
    plan = [
        search_step("freddie stories"),
        answer_step(json.dumps(items)),
    ]
    result = _run_synth(mini_index, plan)
    assert [c.question for c in result.candidates] == [
        "Who wrote The Freddie Stories?",
        "Publisher founded in 1986?",
    ]
    assert result.candidates[0].citations == ("d1",)
    assert result.malformed == 2
    assert result.citation_failures == 1
    assert result.parse_error is None
    assert result.rollout.task_id == "synth"


def test_synthesize_qa_citations_must_be_retrieved(mini_index):
    # d1 is in the corpus but this rollout searched for nothing, so citing it fails
    items = [{"question": "q?", "answer": "a", "citations": ["d1"]}]
    result = _run_synth(mini_index, [answer_step(json.dumps(items))])
    assert result.candidates == []
    assert result.citation_failures == 1


def test_synthesize_qa_caps_candidates(mini_index):
    items = [{"question": f"q{i}?", "answer": f"a{i}", "citations": []} for i in range(6)]
    result = _run_synth(mini_index, [answer_step(json.dumps(items))], seed=_seed(candidates_per_prompt=3))
    assert [c.question for c in result.candidates] == ["q0?", "q1?", "q2?"]
    assert result.malformed == 0


def test_synthesize_qa_extracts_embedded_array(mini_index):
    items = [{"question": "q?", "answer": "a", "citations": []}]
    wrapped = "here you go " + json.dumps(items) + " hope that helps"
    result = _run_synth(mini_index, [answer_step(wrapped)])
    assert len(result.candidates) == 1


def test_synthesize_qa_no_answer(mini_index):
    result = _run_synth(mini_index, [text_response("gave up", finish_reason="length")])
    assert result.candidates == []
    assert result.parse_error == "no final answer"


def test_synthesize_qa_non_array_answer(mini_index):
    result = _run_synth(mini_index, [answer_step("not json at all")])
    assert result.candidates == []
    assert result.parse_error == "final answer is not a JSON array"


def test_synthesize_qa_uses_seed_max_steps(mini_index):
    index, provider = mini_index
    plan = [search_step("a"), search_step("b", "c2")]
    client = SequenceClient(plan)
    result = synthesize_qa(
        _seed(max_steps=2), lambda: make_env(index, provider, max_steps=50), client
    )
    assert result.rollout.truncated
    assert result.rollout.step_count == 2


# --- exact dedup -----------------------------------------------------------------------------


def _qas(*questions):
    return [SyntheticQA(q, f"answer-{i}") for i, q in enumerate(questions)]


def test_dedup_exact_reasons_and_order():
    candidates = [
        SyntheticQA("held-out question", "fresh"),
        SyntheticQA("novel a", "leaked answer"),
        SyntheticQA("novel b", "fine"),
        SyntheticQA("novel b", "fine again"),
        SyntheticQA("novel c", "fine"),
    ]
    result = dedup_exact(
        candidates,
        eval_questions=["held-out question"],
        eval_answers=["leaked answer"],
    )
    assert [c.question for c in result.survivors] == ["novel b", "novel c"]
    assert [(r.index, r.reason) for r in result.removed] == [
        (0, "eval_question_match"),
        (1, "eval_answer_match"),
        (3, "duplicate_in_set"),
    ]
    assert result.removed[1].detail == "leaked answer"
    assert result.quarantined == []


def test_dedup_exact_ignores_answers_when_not_given():
    candidates = [SyntheticQA("q1", "shared"), SyntheticQA("q2", "shared")]
    result = dedup_exact(candidates, eval_questions=[], eval_answers=[])
    assert len(result.survivors) == 2


def test_dedup_exact_keeps_lowest_index_copy():
    result = dedup_exact(_qas("same", "same", "same"))
    assert len(result.survivors) == 1
    assert result.survivors[0].answer == "answer-0"
    assert [r.index for r in result.removed] == [1, 2]


# --- near dedup -------------------------------------------------------------------------------


class _KeywordJudgeClient:
    """Answers the paraphrase judge: yes when any keyword appears in the
    request, garbage when a poison marker appears, else no."""

    def __init__(self, yes_if=(), garbage_if=()):
        self.yes_if = tuple(yes_if)
        self.garbage_if = tuple(garbage_if)
        self.calls = 0

    def generate(self, request):
        self.calls += 1
        content = request.messages[-1].content
        if any(k in content for k in self.garbage_if):
            return text_response("hmm, hard to say")
        verdict = "yes" if any(k in content for k in self.yes_if) else "no"
        return text_response(f"<reasoning>keyword check</reasoning>\n<duplicate>{verdict}</duplicate>")


def _near(candidates, eval_qs, client, top_m=3, eval_answers=None, style="trec"):
    judge = Judge(client, load_template(f"dedup_{style}.txt"))
    return dedup_near(
        candidates,
        eval_qs,
        top_m=top_m,
        judge=judge,
        provider=HashEmbedder(dimension=64, seed=0),
        eval_answers=eval_answers,
    )


def test_dedup_near_removes_judged_paraphrases():
    candidates = _qas("alpha wolf question", "beta fish question", "gamma bird question")
    client = _KeywordJudgeClient(yes_if=("alpha wolf",))
    result = _near(candidates, ["who leads the alpha wolves"], client)
    assert [c.question for c in result.survivors] == ["beta fish question", "gamma bird question"]
    (removal,) = result.removed
    assert removal.reason == "near_duplicate"
    assert removal.question == "alpha wolf question"
    assert removal.detail.startswith("eval#0 sim=")


def test_dedup_near_all_no_keeps_everything():
    candidates = _qas("alpha", "beta", "gamma")
    result = _near(candidates, ["anything"], _KeywordJudgeClient())
    assert result.survivors == candidates
    assert result.removed == []


def test_dedup_near_always_yes_removes_whole_neighborhood():
    candidates = _qas("alpha", "beta", "gamma")
    client = _KeywordJudgeClient(yes_if=("",))  # matches every request
    result = _near(candidates, ["anything"], client, top_m=10)
    assert result.survivors == []
    assert len(result.removed) == 3


def test_dedup_near_top_m_gates_judge_calls():
    candidates = _qas("identical probe text", "totally different words here")
    client = _KeywordJudgeClient(yes_if=("",))
    # the hash embedder scores the identical question at similarity 1.0
    result = _near(candidates, ["identical probe text"], client, top_m=1)
    assert client.calls == 1
    assert [c.question for c in result.survivors] == ["totally different words here"]


def test_dedup_near_removed_candidates_not_rejudged():
    candidates = _qas("alpha")
    client = _KeywordJudgeClient(yes_if=("",))
    result = _near(candidates, ["first eval", "second eval"], client, top_m=1)
    assert client.calls == 1  # removed for eval#0, skipped for eval#1
    assert result.survivors == []


def test_dedup_near_quarantines_unparseable_judgments():
    candidates = _qas("alpha question", "beta question")
    client = _KeywordJudgeClient(yes_if=("alpha",), garbage_if=("beta",))
    result = _near(candidates, ["some eval"], client)
    assert [c.question for c in result.survivors] == ["beta question"]
    (q,) = result.quarantined
    assert q.reason == "judge_parse_failure"
    assert q.question == "beta question"
    assert q.detail == "hmm, hard to say"


def test_dedup_near_passes_eval_answers_to_the_pair_template():
    candidates = _qas("alpha question")
    client = _KeywordJudgeClient()

    class Recorder:
        def __init__(self, inner):
            self.inner = inner
            self.contents = []

        def generate(self, request):
            self.contents.append(request.messages[-1].content)
            return self.inner.generate(request)

    rec = Recorder(client)
    _near(candidates, ["eval q"], rec, eval_answers=["eval a"], style="bcp")
    assert "Answer 2: eval a" in rec.contents[0]
    assert "Question 1: alpha question" in rec.contents[0]


def test_dedup_near_validation_and_passthrough():
    with pytest.raises(ValueError):
        _near(_qas("a"), ["e"], _KeywordJudgeClient(), top_m=0)
    with pytest.raises(ValueError):
        _near(_qas("a"), ["e1", "e2"], _KeywordJudgeClient(), eval_answers=["only one"])
    untouched = _KeywordJudgeClient()
    assert _near([], ["e"], untouched).survivors == []
    assert _near(_qas("a"), [], untouched).survivors == _qas("a")
    assert untouched.calls == 0


# --- quality filtering -----------------------------------------------------------------------


def test_attempt_score_bounds():
    with pytest.raises(ValueError):
        Attempt("text", 1.2)
    with pytest.raises(ValueError):
        Attempt("text", -0.1)


def test_format_attempts_numbering_and_truncation():
    long_text = "z" * (ATTEMPT_TRUNCATION_CHARS + 500)
    formatted = format_attempts([Attempt("short", 0.5), Attempt(long_text, 1.0)])
    assert "Attempt 1 (score: 0.5):\nshort" in formatted
    assert "Attempt 2 (score: 1):" in formatted
    assert "z" * ATTEMPT_TRUNCATION_CHARS in formatted
    assert "z" * (ATTEMPT_TRUNCATION_CHARS + 1) not in formatted


class _RecordingJudgeClient:
    def __init__(self, reply):
        self.reply = reply
        self.contents = []

    def generate(self, request):
        self.contents.append(request.messages[-1].content)
        return text_response(self.reply)


def test_quality_filter_exact_answer_style():
    client = _RecordingJudgeClient("<reasoning>the answer checks out</reasoning>\n<valid>yes</valid>")
    judge = Judge(client, load_template("quality_bcp.txt"))
    verdict = quality_filter(
        "Who wrote it?",
        [Attempt("Exact Answer: Barry", 1.0), Attempt("Exact Answer: Munro", 0.0)],
        judge,
        ground_truth="Barry",
    )
    assert verdict.valid
    assert verdict.reasoning == "the answer checks out"
    prompt = client.contents[0]
    assert "Who wrote it?" in prompt
    assert "Barry" in prompt
    assert "Attempt 2 (score: 0):" in prompt


def test_quality_filter_nugget_style_reports_score_stats():
    client = _RecordingJudgeClient("<reasoning>r</reasoning>\n<valid>no</valid>")
    judge = Judge(client, load_template("quality_trec.txt"))
    verdict = quality_filter(
        "Summarize the topic",
        [Attempt("a", 0.5), Attempt("b", 0.9), Attempt("c", 0.1)],
        judge,
        nuggets=["fact one", "fact two"],
    )
    assert not verdict.valid
    prompt = client.contents[0]
    assert "Average nugget coverage: 50.0%" in prompt
    assert "Best attempt: 90.0%" in prompt
    assert "Worst attempt: 10.0%" in prompt
    assert '"fact one"' in prompt


def test_quality_filter_reasoning_fallback_and_strict_verdict():
    client = _RecordingJudgeClient("sure, this looks fine\n<valid>yes</valid>")
    judge = Judge(client, load_template("quality_bcp.txt"))
    verdict = quality_filter("q", [Attempt("a", 1.0)], judge, ground_truth="g")
    assert verdict.valid
    assert verdict.reasoning == "sure, this looks fine\n<valid>yes</valid>"

    bad = _RecordingJudgeClient("<reasoning>r</reasoning>\n<valid>maybe</valid>")
    with pytest.raises(JudgeParseFailure):
        quality_filter("q", [Attempt("a", 1.0)], Judge(bad, load_template("quality_bcp.txt")), ground_truth="g")


def test_quality_filter_needs_attempts():
    judge = Judge(_RecordingJudgeClient("x"), load_template("quality_bcp.txt"))
    with pytest.raises(ValueError):
        quality_filter("q", [], judge, ground_truth="g")


# --- reporting --------------------------------------------------------------------------------


def test_pipeline_report_balances_and_yields():
    stages = [
        StageReport("exact_dedup", items_in=100, items_out=90, removals={"duplicate_in_set": 10}),
        StageReport("near_dedup", items_in=90, items_out=85, removals={"near_duplicate": 5}),
        StageReport("pass_rate", items_in=85, items_out=70, removals={"solved": 8, "unsolved": 7}),
    ]
    report = pipeline_report(stages)
    assert [row["stage"] for row in report["stages"]] == ["exact_dedup", "near_dedup", "pass_rate"]
    assert report["stages"][0]["yield_pct"] == 90.0
    assert report["stages"][2]["removed"] == 15
    assert report["overall_yield_pct"] == 70.0


def test_pipeline_report_detects_imbalance():
    with pytest.raises(PipelineImbalance):
        pipeline_report([StageReport("broken", items_in=10, items_out=8, removals={"x": 1})])


def test_pipeline_report_empty_and_zero_in():
    assert pipeline_report([]) == {"stages": []}
    report = pipeline_report([StageReport("noop", items_in=0, items_out=0)])
    assert report["stages"][0]["yield_pct"] == 100.0


def test_document_coverage():
    candidates = [
        SyntheticQA("q1", "a", citations=("d1", "d2")),
        SyntheticQA("q2", "a", citations=("d2",)),
        SyntheticQA("q3", "a"),
    ]
    assert document_coverage(candidates, 5) == pytest.approx(0.4)
    assert document_coverage([], 5) == 0.0
    with pytest.raises(ValueError):
        document_coverage(candidates, 0)
