"""Loop arithmetic, baselines, ablation variants, and ledger accounting."""

from __future__ import annotations

import pytest

from chartsmith.agents import NA_SENTINEL, UNIFIED_DELIMITER, SamplingConfig
from chartsmith.errors import AgentChainError, RefusalError, ScriptExhausted
from chartsmith.gateway import TokenUsage
from chartsmith.orchestrator import (
    BudgetLedger,
    LoopConfig,
    RunDeps,
    record_usage,
    run_best_of_n,
    run_direct,
    run_hint,
    run_metal,
    run_method,
    run_variant,
)
from chartsmith.storage import trace_fingerprint
from chartsmith.verifier import ThresholdSchedule

from conftest import (
    NullOcr,
    code_reply,
    failed_outcome,
    make_render_fn,
    make_scorer,
    resp,
    scripted,
    solid_canvas,
)


def deps_with(backend, templates, scorer=None, render_fn=None) -> RunDeps:
    return RunDeps(
        templates=templates,
        backend=backend,
        ocr=NullOcr(),
        render_fn=render_fn or make_render_fn(),
        scorer=scorer,
    )


def cfg(t_max=5, variant="full", paper_order=False, return_last=False) -> LoopConfig:
    return LoopConfig(
        t_max=t_max,
        variant=variant,
        schedule=ThresholdSchedule("average", 0.9),
        sampling=SamplingConfig(),
        paper_order=paper_order,
        return_last=return_last,
    )


def gen_reply(i: int = 0) -> str:
    return code_reply(f"import chart\nchart.draw({i})")


FULL_ROUND_REPLIES = ["visual critique", "code critique"]


def metal_script(pass_at: int, t_max: int = 5) -> list:
    """Responses for a score-first full-variant run that passes at pass_at."""
    replies = [resp(gen_reply(), 100, 50)]
    for i in range(pass_at):
        replies += [resp("v", 10, 20), resp("c", 10, 20), resp(gen_reply(i + 1), 30, 40)]
    return replies


# ---------------------------------------------------------------------------
# score-first arithmetic


def test_pass_at_round_zero_single_call(templates, white_task):
    backend = scripted(*metal_script(0))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=0))
    trace = run_metal(white_task, cfg(), deps)

    assert len(trace.rounds) == 1
    assert trace.stopped_early
    assert len(trace.ledger.entries) == 1
    assert trace.ledger.entries[0].agent == "generation"
    assert trace.rounds[0].visual_critique is None
    assert trace.rounds[0].code_critique is None


def test_pass_at_round_two_makes_seven_calls(templates, white_task):
    backend = scripted(*metal_script(2))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=2))
    trace = run_metal(white_task, cfg(), deps)

    assert len(trace.rounds) == 3
    assert trace.stopped_early
    assert len(trace.ledger.entries) == 7  # 1 + 3 * 2
    agents = [e.agent for e in trace.ledger.entries]
    assert agents == [
        "generation",
        "visual_critique", "code_critique", "revision",
        "visual_critique", "code_critique", "revision",
    ]


def test_never_passing_runs_t_max_rounds(templates, white_task):
    backend = scripted(*metal_script(4))  # enough for 4 revision cycles
    means = [0.5, 0.8, 0.6, 0.7, 0.4]
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=None, means=means))
    trace = run_metal(white_task, cfg(t_max=5), deps)

    assert len(trace.rounds) == 5
    assert not trace.stopped_early
    # 1 generation + 3 calls per revisable round (the final round only scores)
    assert len(trace.ledger.entries) == 1 + 3 * 4
    # final program: argmax of the round means (round 1 here)
    assert trace.final_program.source == trace.rounds[1].program.source


def test_final_selection_tie_goes_to_earliest(templates, white_task):
    backend = scripted(*metal_script(2, t_max=3))
    means = [0.8, 0.8, 0.3]
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=None, means=means))
    trace = run_metal(white_task, cfg(t_max=3), deps)
    assert trace.final_program.source == trace.rounds[0].program.source


def test_return_last_selects_final_round(templates, white_task):
    backend = scripted(*metal_script(2, t_max=3))
    means = [0.8, 0.5, 0.3]
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=None, means=means))
    trace = run_metal(white_task, cfg(t_max=3, return_last=True), deps)
    assert trace.final_program.source == trace.rounds[-1].program.source


def test_round_records_link_programs(templates, white_task):
    backend = scripted(*metal_script(3))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=3))
    trace = run_metal(white_task, cfg(), deps)
    for i, record in enumerate(trace.rounds):
        assert record.round == i
        assert record.decision.round == i
        assert record.program.round == i
        if i > 0:
            assert record.program.parent_round == i - 1


def test_replay_determinism_fingerprint(templates, white_task):
    def run_once():
        backend = scripted(*metal_script(2))
        deps = deps_with(backend, templates, scorer=make_scorer(pass_at=2))
        return run_metal(white_task, cfg(), deps)

    assert trace_fingerprint(run_once()) == trace_fingerprint(run_once())


# ---------------------------------------------------------------------------
# paper-order arithmetic


def paper_script(iterations: int) -> list:
    """Responses for a paper-order full run: initial generation plus four
    agent replies (fresh sample, visual, code, revision) per iteration."""
    replies = [resp(gen_reply(), 100, 50)]
    for i in range(iterations):
        replies += [
            resp(gen_reply(100 + i), 10, 10),  # per-iteration generation sample
            resp("v", 10, 20),
            resp("c", 10, 20),
            resp(gen_reply(i + 1), 30, 40),
        ]
    return replies


def test_paper_order_pass_at_two_makes_thirteen_calls(templates, white_task):
    backend = scripted(*paper_script(3))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=2))
    trace = run_metal(white_task, cfg(paper_order=True), deps)

    assert len(trace.rounds) == 3
    assert trace.stopped_early
    assert len(trace.ledger.entries) == 13  # 1 + 4 * 3
    # every round after round 0 contributes exactly four calls
    assert trace.ledger.calls(round=0) == 5  # initial + the four iteration calls
    assert trace.ledger.calls(round=1) == 4
    assert trace.ledger.calls(round=2) == 4


def test_paper_order_chain_matches_score_first(templates, white_task):
    sf_backend = scripted(*metal_script(2))
    sf_deps = deps_with(sf_backend, templates, scorer=make_scorer(pass_at=2))
    sf = run_metal(white_task, cfg(), sf_deps)

    po_backend = scripted(*paper_script(3))
    po_deps = deps_with(po_backend, templates, scorer=make_scorer(pass_at=2))
    po = run_metal(white_task, cfg(paper_order=True), po_deps)

    assert [r.program.source for r in sf.rounds] == [
        r.program.source for r in po.rounds
    ]
    assert sf.final_program.source == po.final_program.source


def test_paper_order_immediate_pass_spends_full_iteration(templates, white_task):
    backend = scripted(*paper_script(1))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=0))
    trace = run_metal(white_task, cfg(paper_order=True), deps)
    assert len(trace.rounds) == 1
    assert len(trace.ledger.entries) == 5  # 1 + 4


# ---------------------------------------------------------------------------
# revision fallback


def test_revision_extraction_failure_retries_then_carries(templates, white_task):
    replies = [
        resp(gen_reply(), 100, 50),
        resp("v", 10, 20),
        resp("c", 10, 20),
        resp("no code at all"),      # first revision attempt
        resp("still chatting only"), # retry also fails
        resp("v2", 10, 20),
        resp("c2", 10, 20),
        resp(gen_reply(2), 30, 40),
    ]
    backend = scripted(*replies)
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=2))
    trace = run_metal(white_task, cfg(), deps)

    assert trace.rounds[0].revision_failed
    assert trace.ledger.calls(agent="revision", round=0) == 2
    # carried program: round advanced, source unchanged
    assert trace.rounds[1].program.source == trace.rounds[0].program.source
    assert trace.rounds[1].program.round == 1


def test_gateway_error_wrapped_with_partial_trace(templates, white_task):
    backend = scripted(resp(gen_reply(), 100, 50), resp("v", 1, 1))  # exhausts at C
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=None))
    with pytest.raises(AgentChainError) as excinfo:
        run_metal(white_task, cfg(), deps)
    partial = excinfo.value.partial_trace
    assert partial is not None
    assert partial.ledger.calls() == 2
    assert isinstance(excinfo.value.__cause__, ScriptExhausted)


# ---------------------------------------------------------------------------
# baselines


def test_run_direct_single_round(templates, white_task):
    backend = scripted(resp(gen_reply(), 100, 50))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=None))
    trace = run_direct(white_task, cfg(), deps)
    assert trace.method == "direct"
    assert len(trace.rounds) == 1
    assert len(trace.ledger.entries) == 1
    assert trace.final_program.source == trace.rounds[0].program.source


def test_run_direct_failed_render_scores_zero(templates, white_task):
    backend = scripted(resp(gen_reply(), 100, 50))
    deps = RunDeps(
        templates=templates,
        backend=backend,
        ocr=NullOcr(),
        render_fn=lambda p: failed_outcome(),
    )
    trace = run_direct(white_task, cfg(), deps)
    scores = trace.rounds[0].decision.scores
    assert (scores.color, scores.text, scores.structure) == (0, 0, 0)


def test_run_hint_injects_description(templates, white_task):
    backend = scripted(resp("a blue four-bar chart", 5, 5), resp(gen_reply(), 100, 50))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=None))
    trace = run_hint(white_task, cfg(), deps)

    agents = [e.agent for e in trace.ledger.entries]
    assert agents == ["hint_describer", "generation"]
    generation_prompt = backend.calls[1].messages[0].parts[0].text
    assert "a blue four-bar chart" in generation_prompt


def test_run_hint_empty_reply_surfaces_refusal(templates, white_task):
    backend = scripted(resp(""))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=None))
    with pytest.raises(AgentChainError) as excinfo:
        run_hint(white_task, cfg(), deps)
    assert isinstance(excinfo.value.__cause__, RefusalError)


def test_best_of_n_argmax(templates, white_task):
    backend = scripted(*[resp(gen_reply(i), 10, 10) for i in range(3)])
    deps = deps_with(
        backend, templates, scorer=make_scorer(pass_at=None, means=[0.5, 0.9, 0.7])
    )
    trace = run_best_of_n(white_task, 3, cfg(), deps)
    assert trace.method == "best_of_n"
    assert len(trace.rounds) == 3
    assert not trace.stopped_early
    assert trace.final_program.source == trace.rounds[1].program.source


def test_best_of_n_tie_to_lowest_index(templates, white_task):
    backend = scripted(*[resp(gen_reply(i), 10, 10) for i in range(2)])
    deps = deps_with(
        backend, templates, scorer=make_scorer(pass_at=None, means=[0.8, 0.8])
    )
    trace = run_best_of_n(white_task, 2, cfg(), deps)
    assert trace.final_program.source == trace.rounds[0].program.source


def test_best_of_one_equals_direct(templates, white_task):
    script = [resp(gen_reply(), 10, 10)]
    bon = run_best_of_n(
        white_task,
        1,
        cfg(),
        deps_with(scripted(*script), templates, scorer=make_scorer(pass_at=None)),
    )
    direct = run_direct(
        white_task,
        cfg(),
        deps_with(scripted(*script), templates, scorer=make_scorer(pass_at=None)),
    )
    assert bon.final_program.source == direct.final_program.source


def test_best_of_n_requires_positive_n(templates, white_task):
    deps = deps_with(scripted(resp("x")), templates)
    with pytest.raises(ValueError):
        run_best_of_n(white_task, 0, cfg(), deps)


# ---------------------------------------------------------------------------
# ablation variants


def variant_script(pass_at: int, per_round: list) -> list:
    replies = [resp(gen_reply(), 100, 50)]
    for i in range(pass_at):
        replies += [resp(text, 10, 20) for text in per_round]
        replies += [resp(gen_reply(i + 1), 30, 40)]
    return replies


def test_visual_only_has_no_code_critique_calls(templates, white_task):
    backend = scripted(*variant_script(2, ["v"]))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=2))
    trace = run_variant(white_task, "visual_only", cfg(variant="visual_only"), deps)

    assert trace.ledger.calls(agent="code_critique") == 0
    assert trace.ledger.calls(agent="visual_critique") == 2
    assert all(r.code_critique is None for r in trace.rounds)
    # revision prompt carries the sentinel where code feedback would go
    revision_prompts = [
        c.messages[0].parts[0].text
        for c in backend.calls
        if "Code feedback" in c.messages[0].parts[0].text
    ]
    assert all(NA_SENTINEL in p for p in revision_prompts)


def test_code_only_has_no_visual_critique_calls(templates, white_task):
    backend = scripted(*variant_script(2, ["c"]))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=2))
    trace = run_variant(white_task, "code_only", cfg(variant="code_only"), deps)

    assert trace.ledger.calls(agent="visual_critique") == 0
    assert trace.ledger.calls(agent="code_critique") == 2
    assert all(r.visual_critique is None for r in trace.rounds)


def test_code_only_proceeds_on_failed_render(templates, white_task):
    backend = scripted(*variant_script(2, ["c"]))
    deps = RunDeps(
        templates=templates,
        backend=backend,
        ocr=NullOcr(),
        render_fn=lambda p: failed_outcome(),
        scorer=make_scorer(pass_at=2),
    )
    trace = run_variant(white_task, "code_only", cfg(variant="code_only"), deps)
    assert len(trace.rounds) == 3
    assert trace.ledger.calls(agent="code_critique") == 2


def test_single_critique_uses_unified_agent(templates, white_task):
    unified = f"visual part\n{UNIFIED_DELIMITER}\ncode part"
    backend = scripted(*variant_script(2, [unified]))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=2))
    trace = run_variant(
        white_task, "single_critique", cfg(variant="single_critique"), deps
    )

    assert trace.ledger.calls(agent="unified_critique") == 2
    assert trace.ledger.calls(agent="visual_critique") == 0
    assert trace.ledger.calls(agent="code_critique") == 0
    assert trace.rounds[0].visual_critique.text == "visual part"
    assert trace.rounds[0].code_critique.text == "code part"


def test_single_critique_paper_order_three_calls_per_later_round(
    templates, white_task
):
    unified = f"v\n{UNIFIED_DELIMITER}\nc"
    replies = [resp(gen_reply(), 100, 50)]
    for i in range(3):
        replies += [
            resp(gen_reply(100 + i), 10, 10),
            resp(unified, 10, 20),
            resp(gen_reply(i + 1), 30, 40),
        ]
    backend = scripted(*replies)
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=2))
    trace = run_metal(
        white_task, cfg(variant="single_critique", paper_order=True), deps
    )

    assert len(trace.rounds) == 3
    assert trace.ledger.calls(round=1) == 3  # sample, unified, revision
    assert trace.ledger.calls(round=2) == 3
    assert len(trace.ledger.entries) == 1 + 3 * 3


def test_run_method_dispatch(templates, white_task):
    backend = scripted(resp(gen_reply(), 10, 10))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=0))
    trace = run_method(white_task, "metal", cfg(), deps)
    assert trace.method == "metal"
    with pytest.raises(ValueError):
        run_method(white_task, "bogus", cfg(), deps)


# ---------------------------------------------------------------------------
# ledger


def test_record_usage_appends_and_sums():
    ledger = BudgetLedger()
    record_usage(ledger, 0, "generation", TokenUsage(100, 50))
    record_usage(ledger, 1, "revision", TokenUsage(200, 60))
    assert ledger.cumulative_completion() == 110
    assert ledger.cumulative_completion(through_round=0) == 50
    total = ledger.total_usage()
    assert (total.prompt_tokens, total.completion_tokens) == (300, 110)


def test_empty_ledger_cumulative_zero():
    assert BudgetLedger().cumulative_completion() == 0


def test_estimated_entries_flagged(templates, white_task):
    backend = scripted(resp(gen_reply(), 0, 37, estimated=True))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=0))
    trace = run_metal(white_task, cfg(), deps)
    assert trace.ledger.entries[0].estimated


def test_cumulative_non_decreasing_in_round(templates, white_task):
    backend = scripted(*metal_script(3))
    deps = deps_with(backend, templates, scorer=make_scorer(pass_at=3))
    trace = run_metal(white_task, cfg(), deps)
    running = [
        trace.ledger.cumulative_completion(through_round=r.round)
        for r in trace.rounds
    ]
    assert running == sorted(running)


def test_per_agent_backend_override(templates, white_task):
    main = scripted(resp(gen_reply(), 10, 10))
    critique_backend = scripted(resp("v", 1, 1), resp("c", 1, 1))
    revision_backend = scripted(resp(gen_reply(1), 2, 2))
    deps = RunDeps(
        templates=templates,
        backend=main,
        ocr=NullOcr(),
        agent_backends={
            "visual_critique": critique_backend,
            "code_critique": critique_backend,
            "revision": revision_backend,
        },
        agent_model_ids={"revision": "rev-model"},
        render_fn=make_render_fn(),
        scorer=make_scorer(pass_at=1),
    )
    trace = run_metal(white_task, cfg(), deps)
    assert len(trace.rounds) == 2
    assert len(main.calls) == 1
    assert len(critique_backend.calls) == 2
    assert len(revision_backend.calls) == 1
    assert revision_backend.calls[0].model_id == "rev-model"
