"""Element-level F1 over text, type, color, and layout facets.

Gold and generated programs are executed with tracing, and the logged
elements of each facet are matched as multisets after normalization. This
metric is deliberately independent of the image-similarity verifier: the
two share nothing beyond image decoding.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .errors import GoldRenderError, UnknownFacet
from .renderer import ElementTrace, RenderOutcome

logger = logging.getLogger(__name__)

FACETS = ("text", "type", "color", "layout")

LOG2_BUCKETS = (9, 10, 11, 12, 13)

_VOCAB_PATH = Path(__file__).parent / "assets" / "chart_types.json"


def load_type_vocabulary(path: Path = _VOCAB_PATH) -> tuple[frozenset[str], dict[str, str]]:
    data = json.loads(path.read_text(encoding="utf-8"))
    return frozenset(data["canonical"]), dict(data["aliases"])


_CANONICAL_TYPES, _TYPE_ALIASES = load_type_vocabulary()


@dataclass(frozen=True)
class FacetF1:
    facet: str
    precision: float
    recall: float
    f1: float
    gold_count: int
    gen_count: int
    matched: int


@dataclass(frozen=True)
class EvaluationReport:
    task_id: str
    facets: dict[str, FacetF1]

    @property
    def average_f1(self) -> float:
        return sum(self.facets[f].f1 for f in FACETS) / len(FACETS)


@dataclass(frozen=True)
class ScalingPoint:
    cumulative_completion_tokens: int
    best_score_so_far: float


@dataclass(frozen=True)
class ScalingBucket:
    """One merged row of the scaling report: a log2 token budget bucket."""

    log2_tokens: int
    mean_best_score: float
    n_tasks: int


# ---------------------------------------------------------------------------
# normalization


def normalize_text(value: str) -> str:
    return " ".join(value.split()).casefold()


def normalize_color(value: str) -> str:
    return value.strip().lower()


def normalize_type(value: str) -> str:
    key = value.strip().lower()
    key = _TYPE_ALIASES.get(key, key)
    return key if key in _CANONICAL_TYPES else "other"


def _facet_elements(trace: ElementTrace, facet: str) -> list:
    if facet == "text":
        return [normalize_text(t) for t in trace.texts]
    if facet == "type":
        return [normalize_type(t) for t in trace.chart_types]
    if facet == "color":
        return [normalize_color(c) for c in trace.colors]
    if facet == "layout":
        return [tuple(t) for t in trace.layout]
    raise UnknownFacet(f"unknown facet {facet!r}")


# ---------------------------------------------------------------------------
# F1


def facet_f1(gold: ElementTrace, gen: ElementTrace, facet: str) -> FacetF1:
    """Multiset-matched precision/recall/F1 for one facet."""
    gold_elems = Counter(_facet_elements(gold, facet))
    gen_elems = Counter(_facet_elements(gen, facet))
    gold_count = sum(gold_elems.values())
    gen_count = sum(gen_elems.values())
    matched = sum((gold_elems & gen_elems).values())

    if gold_count == 0 and gen_count == 0:
        precision = recall = 1.0
    else:
        precision = matched / gen_count if gen_count else 0.0
        recall = matched / gold_count if gold_count else 0.0
    denom = precision + recall
    f1 = 2.0 * precision * recall / denom if denom > 0 else 0.0
    return FacetF1(
        facet=facet,
        precision=precision,
        recall=recall,
        f1=f1,
        gold_count=gold_count,
        gen_count=gen_count,
        matched=matched,
    )


TracedRenderer = Callable[[str], "tuple[RenderOutcome, ElementTrace | None]"]


def evaluate_task(
    gold_program: str,
    final_program: str,
    renderer: TracedRenderer,
    task_id: str = "",
) -> EvaluationReport:
    """Render both programs with tracing and compare the four facets.

    A gold program that fails to render (or produces no trace) raises
    GoldRenderError; the task is then excluded upstream. A failed
    generated render scores 0 on every facet.
    """
    gold_outcome, gold_trace = renderer(gold_program)
    if gold_outcome.status != "success" or gold_trace is None:
        raise GoldRenderError(
            f"gold program failed: status={gold_outcome.status}, "
            f"trace={'present' if gold_trace else 'absent'}"
        )

    gen_outcome, gen_trace = renderer(final_program)
    if gen_outcome.status != "success" or gen_trace is None:
        gen_trace = ElementTrace()

    facets = {f: facet_f1(gold_trace, gen_trace, f) for f in FACETS}
    return EvaluationReport(task_id=task_id, facets=facets)


@dataclass(frozen=True)
class AggregateSummary:
    facet_means: dict[str, float]
    overall_average: float
    n_tasks: int
    excluded: tuple[str, ...] = ()


def aggregate(reports: Sequence[EvaluationReport], excluded: Sequence[str] = ()) -> AggregateSummary:
    """Per-facet means across tasks plus the overall average."""
    if not reports:
        raise ValueError("cannot aggregate zero reports")
    facet_means = {
        f: sum(r.facets[f].f1 for r in reports) / len(reports) for f in FACETS
    }
    overall = sum(r.average_f1 for r in reports) / len(reports)
    return AggregateSummary(
        facet_means=facet_means,
        overall_average=overall,
        n_tasks=len(reports),
        excluded=tuple(excluded),
    )


# ---------------------------------------------------------------------------
# test-time scaling series


def _round_score(record, scorer: str) -> float:
    if scorer == "verifier_avg":
        return record.decision.scores.mean
    if scorer == "eval_f1":
        if record.eval_score is None:
            raise ValueError(
                f"round {record.round} has no eval score; backfill before "
                "building an eval_f1 series"
            )
        return record.eval_score
    raise ValueError(f"unknown scorer {scorer!r}")


def running_best(trace, scorer: str = "verifier_avg") -> list[ScalingPoint]:
    """Per-round (cumulative completion tokens, best score so far) points."""
    points: list[ScalingPoint] = []
    best = 0.0
    for record in trace.rounds:
        cumulative = trace.ledger.cumulative_completion(through_round=record.round)
        best = max(best, _round_score(record, scorer))
        points.append(ScalingPoint(cumulative, best))
    return points


def scaling_series(traces: Sequence, scorer: str = "verifier_avg") -> list[ScalingBucket]:
    """Merge per-trace running-best curves into log2 token-budget buckets.

    For each bucket b, every trace contributes its best score achieved
    within a cumulative completion budget of 2**b tokens; traces with no
    round inside the budget are left out of that bucket, and buckets with
    no contributors are omitted entirely.
    """
    per_trace = [running_best(t, scorer) for t in traces]
    rows: list[ScalingBucket] = []
    for bucket in LOG2_BUCKETS:
        budget = 2**bucket
        contributions = []
        for points in per_trace:
            within = [p.best_score_so_far for p in points if p.cumulative_completion_tokens <= budget]
            if within:
                contributions.append(within[-1])
        if contributions:
            rows.append(
                ScalingBucket(
                    log2_tokens=bucket,
                    mean_best_score=sum(contributions) / len(contributions),
                    n_tasks=len(contributions),
                )
            )
    return rows
