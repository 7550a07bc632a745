"""Iterative refinement loop, baselines, ablation variants, and budget accounting.

The default loop ordering is score-first: each round renders and scores
the current program, stops on a pass, and only then spends critique and
revision calls. The ``paper_order`` flag switches to a call-fidelity mode
in which all four agents act once per iteration regardless of the pass
check (one generation sample, both critiques, one revision per iteration,
on top of the initial generation), reproducing the canonical
4-calls-per-iteration budget arithmetic while leaving the program chain
identical to the default mode.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from PIL import Image

from .agents import (
    CodeCritique,
    GeneratedProgram,
    SamplingConfig,
    TemplateSet,
    VisualCritique,
    critique_code,
    critique_unified,
    critique_visual,
    describe_hint,
    generate,
    revise,
)
from .errors import AgentChainError, CodeExtractionError, GatewayError
from .gateway import Backend, TokenUsage
from .renderer import RenderLimits, RenderOutcome, render
from .verifier import PassDecision, TextExtractor, ThresholdSchedule, score_pair

logger = logging.getLogger(__name__)

METHODS = ("metal", "direct", "hint", "best_of_n")
VARIANTS = ("full", "visual_only", "code_only", "single_critique")


@dataclass(frozen=True)
class ChartTask:
    """One benchmark item: a reference image plus optional extras."""

    task_id: str
    reference_image: bytes
    instruction: str | None = None
    gold_program: str | None = None
    reference_path: Path | None = None

    def __post_init__(self):
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        try:
            Image.open(io.BytesIO(self.reference_image)).verify()
        except Exception as exc:
            raise ValueError(f"reference image does not decode: {exc}") from exc


@dataclass(frozen=True)
class LoopConfig:
    t_max: int = 5
    variant: str = "full"
    schedule: ThresholdSchedule = field(default_factory=ThresholdSchedule)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    paper_order: bool = False
    return_last: bool = False

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    agent: str
    prompt_tokens: int
    completion_tokens: int
    estimated: bool = False


class BudgetLedger:
    """Append-only token accounting across one run."""

    def __init__(self):
        self.entries: list[LedgerEntry] = []

    def record(
        self, round: int, agent: str, usage: TokenUsage, estimated: bool = False
    ) -> None:
        self.entries.append(
            LedgerEntry(
                round=round,
                agent=agent,
                prompt_tokens=usage.prompt_tokens,
                completion_tokens=usage.completion_tokens,
                estimated=estimated,
            )
        )

    def cumulative_completion(self, through_round: int | None = None) -> int:
        return sum(
            e.completion_tokens
            for e in self.entries
            if through_round is None or e.round <= through_round
        )

    def total_usage(self) -> TokenUsage:
        total = TokenUsage()
        for e in self.entries:
            total = total + TokenUsage(e.prompt_tokens, e.completion_tokens)
        return total

    def calls(self, agent: str | None = None, round: int | None = None) -> int:
        return sum(
            1
            for e in self.entries
            if (agent is None or e.agent == agent)
            and (round is None or e.round == round)
        )

    def entries_for_round(self, round: int) -> tuple[LedgerEntry, ...]:
        return tuple(e for e in self.entries if e.round == round)


def record_usage(
    ledger: BudgetLedger,
    round: int,
    agent: str,
    usage: TokenUsage,
    estimated: bool = False,
) -> BudgetLedger:
    ledger.record(round, agent, usage, estimated)
    return ledger


@dataclass(frozen=True)
class RoundRecord:
    round: int
    program: GeneratedProgram
    render: RenderOutcome
    decision: PassDecision
    visual_critique: VisualCritique | None = None
    code_critique: CodeCritique | None = None
    revision_failed: bool = False
    usage: tuple[LedgerEntry, ...] = ()
    eval_score: float | None = None

    def __post_init__(self):
        if self.decision.round != self.round:
            raise ValueError("decision round must match record round")


@dataclass(frozen=True)
class RunTrace:
    task_id: str
    method: str
    rounds: tuple[RoundRecord, ...]
    stopped_early: bool
    final_program: GeneratedProgram | None
    ledger: BudgetLedger


@dataclass
class RunDeps:
    """Everything a run needs beyond the task and loop config.

    ``render_fn`` and ``scorer`` default to the real renderer and verifier
    composition; tests inject deterministic stand-ins through them.
    """

    templates: TemplateSet
    backend: Backend
    ocr: TextExtractor
    agent_backends: dict[str, Backend] = field(default_factory=dict)
    model_id: str = "default"
    agent_model_ids: dict[str, str] = field(default_factory=dict)
    render_command: str = "python3"
    render_limits: RenderLimits = field(default_factory=RenderLimits)
    keep_artifacts: bool = False
    render_fn: Callable[[GeneratedProgram], RenderOutcome] | None = None
    scorer: Callable[[RenderOutcome, int], PassDecision] | None = None

    def backend_for(self, agent: str) -> Backend:
        return self.agent_backends.get(agent, self.backend)

    def model_for(self, agent: str) -> str:
        return self.agent_model_ids.get(agent, self.model_id)


class _CallLog:
    """Taps agent backends so every call's usage lands in the ledger."""

    def __init__(self):
        self.events: list = []

    def wrap(self, backend: Backend) -> "_Tap":
        return _Tap(backend, self.events)

    def drain(self) -> list:
        events, self.events = self.events[:], []
        return events


class _Tap:
    def __init__(self, inner: Backend, events: list):
        self._inner = inner
        self._events = events

    def complete(self, request):
        response = self._inner.complete(request)
        self._events.append(response)
        return response


class _Run:
    """Shared machinery for one task's run."""

    def __init__(self, task: ChartTask, cfg: LoopConfig, deps: RunDeps, method: str):
        self.task = task
        self.cfg = cfg
        self.deps = deps
        self.method = method
        self.ledger = BudgetLedger()
        self.rounds: list[RoundRecord] = []
        self._log = _CallLog()

    def sampling_for(self, agent: str) -> SamplingConfig:
        return replace(self.cfg.sampling, model_id=self.deps.model_for(agent))

    def call(self, agent: str, round: int, fn):
        tapped = self._log.wrap(self.deps.backend_for(agent))
        try:
            return fn(tapped)
        finally:
            for response in self._log.drain():
                self.ledger.record(
                    round, agent, response.usage, response.usage_estimated
                )

    def render(self, program: GeneratedProgram) -> RenderOutcome:
        if self.deps.render_fn is not None:
            return self.deps.render_fn(program)
        return render(
            program,
            limits=self.deps.render_limits,
            command=self.deps.render_command,
            keep_artifacts=self.deps.keep_artifacts,
        )

    def score(self, outcome: RenderOutcome, round: int) -> PassDecision:
        if self.deps.scorer is not None:
            return self.deps.scorer(outcome, round)
        return score_pair(
            outcome,
            self.task.reference_image,
            self.deps.ocr,
            self.cfg.schedule,
            round,
            ref_source=self.task.reference_path,
        )

    def partial_trace(self) -> RunTrace:
        return self._trace(final=None)

    def _trace(self, final: GeneratedProgram | None) -> RunTrace:
        return RunTrace(
            task_id=self.task.task_id,
            method=self.method,
            rounds=tuple(self.rounds),
            stopped_early=any(r.decision.passed for r in self.rounds)
            and self.method == "metal",
            final_program=final,
            ledger=self.ledger,
        )

    def finish(self) -> RunTrace:
        return self._trace(final=self.select_final())

    def select_final(self) -> GeneratedProgram | None:
        if not self.rounds:
            return None
        passing = [r for r in self.rounds if r.decision.passed]
        if passing:
            return passing[-1].program
        if self.cfg.return_last and self.method == "metal":
            return self.rounds[-1].program
        # max() keeps the earliest of tied rounds, which is the tie rule.
        best = max(self.rounds, key=lambda r: r.decision.scores.mean)
        return best.program


def _critiques(
    run: _Run, program: GeneratedProgram, outcome: RenderOutcome, t: int
) -> tuple[VisualCritique | None, CodeCritique | None]:
    deps, cfg, task = run.deps, run.cfg, run.task
    variant = cfg.variant
    if variant == "single_critique":
        return run.call(
            "unified_critique",
            t,
            lambda b: critique_unified(
                outcome,
                task.reference_image,
                program,
                deps.templates,
                b,
                run.sampling_for("unified_critique"),
            ),
        )
    visual = None
    code = None
    if variant in ("full", "visual_only"):
        visual = run.call(
            "visual_critique",
            t,
            lambda b: critique_visual(
                outcome,
                task.reference_image,
                deps.templates,
                b,
                run.sampling_for("visual_critique"),
            ),
        )
    if variant in ("full", "code_only"):
        code = run.call(
            "code_critique",
            t,
            lambda b: critique_code(
                program, deps.templates, b, run.sampling_for("code_critique")
            ),
        )
    return visual, code


def _revise_with_retry(
    run: _Run,
    program: GeneratedProgram,
    visual: VisualCritique | None,
    code: CodeCritique | None,
    t: int,
) -> tuple[GeneratedProgram, bool]:
    """Revision with one retry on extraction failure; a second failure
    carries the current program forward and flags the round."""
    for attempt in range(2):
        try:
            revised = run.call(
                "revision",
                t,
                lambda b: revise(
                    program,
                    visual,
                    code,
                    run.deps.templates,
                    b,
                    run.sampling_for("revision"),
                ),
            )
            return revised, False
        except CodeExtractionError:
            logger.warning(
                "revision reply had no extractable code (round %d, attempt %d)",
                t,
                attempt + 1,
            )
    carried = GeneratedProgram(
        source=program.source,
        round=program.round + 1,
        raw_model_text=program.raw_model_text,
        parent_round=program.round,
    )
    return carried, True


def _initial_generation(run: _Run, hint: str | None = None) -> GeneratedProgram:
    return run.call(
        "generation",
        0,
        lambda b: generate(
            run.task.reference_image,
            run.task.instruction,
            run.deps.templates,
            b,
            run.sampling_for("generation"),
            hint=hint,
        ),
    )


def run_metal(task: ChartTask, cfg: LoopConfig, deps: RunDeps) -> RunTrace:
    """The iterative refinement loop (all variants)."""
    run = _Run(task, cfg, deps, method="metal")
    try:
        program = _initial_generation(run)
    except GatewayError as exc:
        raise AgentChainError(str(exc), partial_trace=run.partial_trace()) from exc

    try:
        for t in range(cfg.t_max):
            outcome = run.render(program)
            visual = code = None
            if cfg.paper_order:
                # Call-fidelity mode: every agent acts once per iteration,
                # before the pass check, whatever the verdict turns out to be.
                run.call(
                    "generation",
                    t,
                    lambda b: generate(
                        task.reference_image,
                        task.instruction,
                        deps.templates,
                        b,
                        run.sampling_for("generation"),
                    ),
                )
                visual, code = _critiques(run, program, outcome, t)

            decision = run.score(outcome, t)
            last = t == cfg.t_max - 1

            if decision.passed:
                if cfg.paper_order:
                    try:
                        _revise_with_retry(run, program, visual, code, t)
                    except GatewayError:
                        raise
                run.rounds.append(
                    RoundRecord(
                        round=t,
                        program=program,
                        render=outcome,
                        decision=decision,
                        visual_critique=visual,
                        code_critique=code,
                        usage=run.ledger.entries_for_round(t),
                    )
                )
                break

            if not cfg.paper_order:
                if last:
                    run.rounds.append(
                        RoundRecord(
                            round=t,
                            program=program,
                            render=outcome,
                            decision=decision,
                            usage=run.ledger.entries_for_round(t),
                        )
                    )
                    break
                visual, code = _critiques(run, program, outcome, t)

            next_program, failed = _revise_with_retry(run, program, visual, code, t)
            run.rounds.append(
                RoundRecord(
                    round=t,
                    program=program,
                    render=outcome,
                    decision=decision,
                    visual_critique=visual,
                    code_critique=code,
                    revision_failed=failed,
                    usage=run.ledger.entries_for_round(t),
                )
            )
            if last:
                break
            program = next_program
    except GatewayError as exc:
        raise AgentChainError(str(exc), partial_trace=run.partial_trace()) from exc

    return run.finish()


def run_variant(
    task: ChartTask, variant: str, cfg: LoopConfig, deps: RunDeps
) -> RunTrace:
    return run_metal(task, replace(cfg, variant=variant), deps)


def run_direct(task: ChartTask, cfg: LoopConfig, deps: RunDeps) -> RunTrace:
    """Single generate + render + score, no critiques."""
    run = _Run(task, cfg, deps, method="direct")
    try:
        program = _initial_generation(run)
    except GatewayError as exc:
        raise AgentChainError(str(exc), partial_trace=run.partial_trace()) from exc
    outcome = run.render(program)
    decision = run.score(outcome, 0)
    run.rounds.append(
        RoundRecord(
            round=0,
            program=program,
            render=outcome,
            decision=decision,
            usage=run.ledger.entries_for_round(0),
        )
    )
    return run.finish()


def run_hint(task: ChartTask, cfg: LoopConfig, deps: RunDeps) -> RunTrace:
    """Generation augmented with a self-generated chart description."""
    run = _Run(task, cfg, deps, method="hint")
    try:
        hint = run.call(
            "hint_describer",
            0,
            lambda b: describe_hint(
                task.reference_image,
                deps.templates,
                b,
                run.sampling_for("hint_describer"),
            ),
        )
        program = _initial_generation(run, hint=hint)
    except GatewayError as exc:
        raise AgentChainError(str(exc), partial_trace=run.partial_trace()) from exc
    outcome = run.render(program)
    decision = run.score(outcome, 0)
    run.rounds.append(
        RoundRecord(
            round=0,
            program=program,
            render=outcome,
            decision=decision,
            usage=run.ledger.entries_for_round(0),
        )
    )
    return run.finish()


def run_best_of_n(task: ChartTask, n: int, cfg: LoopConfig, deps: RunDeps) -> RunTrace:
    """n independent candidates; the best average verifier score wins,
    ties going to the lowest candidate index."""
    if n < 1:
        raise ValueError("n must be >= 1")
    run = _Run(task, cfg, deps, method="best_of_n")
    try:
        for i in range(n):
            # Candidates are independent round-0 generations; the record's
            # round is the candidate index.
            program = run.call(
                "generation",
                i,
                lambda b: generate(
                    task.reference_image,
                    task.instruction,
                    deps.templates,
                    b,
                    run.sampling_for("generation"),
                ),
            )
            outcome = run.render(program)
            decision = run.score(outcome, i)
            run.rounds.append(
                RoundRecord(
                    round=i,
                    program=program,
                    render=outcome,
                    decision=decision,
                    usage=run.ledger.entries_for_round(i),
                )
            )
    except GatewayError as exc:
        raise AgentChainError(str(exc), partial_trace=run.partial_trace()) from exc

    best = max(run.rounds, key=lambda r: r.decision.scores.mean)
    return RunTrace(
        task_id=task.task_id,
        method="best_of_n",
        rounds=tuple(run.rounds),
        stopped_early=False,
        final_program=best.program,
        ledger=run.ledger,
    )


def run_method(
    task: ChartTask, method: str, cfg: LoopConfig, deps: RunDeps, n: int = 5
) -> RunTrace:
    """Dispatch one task to a named method or ablation variant."""
    if method == "metal":
        return run_metal(task, cfg, deps)
    if method == "direct":
        return run_direct(task, cfg, deps)
    if method == "hint":
        return run_hint(task, cfg, deps)
    if method == "best_of_n":
        return run_best_of_n(task, n, cfg, deps)
    if method == "metal_v":
        return run_variant(task, "visual_only", cfg, deps)
    if method == "metal_c":
        return run_variant(task, "code_only", cfg, deps)
    if method == "metal_s":
        return run_variant(task, "single_critique", cfg, deps)
    raise ValueError(f"unknown method {method!r}")
