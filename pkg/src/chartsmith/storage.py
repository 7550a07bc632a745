"""Run-directory persistence and report files.

Layout per run:

    {root}/runs/{run_id}/{task_id}/round_{t}/program.src
                                            /chart.png
                                            /visual_critique.txt
                                            /code_critique.txt
                                            /scores.json
    {root}/runs/{run_id}/{task_id}/trace.json
    {root}/runs/{run_id}/run.json
    {root}/reports/{run_id}/f1.csv
    {root}/reports/{run_id}/scaling.csv
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Sequence

from .agents import CodeCritique, GeneratedProgram, VisualCritique
from .evaluator import FACETS, EvaluationReport, ScalingBucket
from .orchestrator import BudgetLedger, RoundRecord, RunTrace
from .renderer import RenderOutcome
from .verifier import PassDecision, VerifierScores

logger = logging.getLogger(__name__)


def _program_to_dict(program: GeneratedProgram | None) -> dict | None:
    if program is None:
        return None
    return {
        "source": program.source,
        "round": program.round,
        "raw_model_text": program.raw_model_text,
        "parent_round": program.parent_round,
    }


def _decision_to_dict(decision: PassDecision) -> dict:
    return {
        "passed": decision.passed,
        "threshold_used": decision.threshold_used,
        "round": decision.round,
        "scores": {
            "color": decision.scores.color,
            "text": decision.scores.text,
            "structure": decision.scores.structure,
        },
    }


def round_to_dict(record: RoundRecord) -> dict:
    return {
        "round": record.round,
        "program": _program_to_dict(record.program),
        "render": {
            "status": record.render.status,
            "stdout": record.render.stdout,
            "stderr": record.render.stderr,
            "duration": record.render.duration,
        },
        "decision": _decision_to_dict(record.decision),
        "visual_critique": None
        if record.visual_critique is None
        else {
            "text": record.visual_critique.text,
            "render_failed": record.visual_critique.render_failed,
            "failure_note": record.visual_critique.failure_note,
        },
        "code_critique": None
        if record.code_critique is None
        else {"text": record.code_critique.text},
        "revision_failed": record.revision_failed,
        "eval_score": record.eval_score,
    }


def trace_to_dict(trace: RunTrace) -> dict:
    return {
        "task_id": trace.task_id,
        "method": trace.method,
        "stopped_early": trace.stopped_early,
        "final_program": _program_to_dict(trace.final_program),
        "rounds": [round_to_dict(r) for r in trace.rounds],
        "ledger": [
            {
                "round": e.round,
                "agent": e.agent,
                "prompt_tokens": e.prompt_tokens,
                "completion_tokens": e.completion_tokens,
                "estimated": e.estimated,
            }
            for e in trace.ledger.entries
        ],
    }


def trace_fingerprint(trace: RunTrace) -> str:
    """Canonical serialization of the replay-deterministic parts of a
    trace: programs, scores, and the ledger. Timing fields are excluded."""
    payload = {
        "programs": [r.program.source for r in trace.rounds],
        "final": trace.final_program.source if trace.final_program else None,
        "scores": [
            [
                r.decision.scores.color,
                r.decision.scores.text,
                r.decision.scores.structure,
                r.decision.passed,
            ]
            for r in trace.rounds
        ],
        "ledger": [
            [e.round, e.agent, e.prompt_tokens, e.completion_tokens, e.estimated]
            for e in trace.ledger.entries
        ],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def persist_trace(run_dir: Path, trace: RunTrace) -> Path:
    """Write one task's round artifacts and trace.json; returns the task dir."""
    task_dir = Path(run_dir) / trace.task_id
    task_dir.mkdir(parents=True, exist_ok=True)
    for record in trace.rounds:
        round_dir = task_dir / f"round_{record.round}"
        round_dir.mkdir(parents=True, exist_ok=True)
        (round_dir / "program.src").write_text(record.program.source, encoding="utf-8")
        if record.render.image is not None:
            (round_dir / "chart.png").write_bytes(record.render.image)
        if record.visual_critique is not None:
            (round_dir / "visual_critique.txt").write_text(
                record.visual_critique.text, encoding="utf-8"
            )
        if record.code_critique is not None:
            (round_dir / "code_critique.txt").write_text(
                record.code_critique.text, encoding="utf-8"
            )
        (round_dir / "scores.json").write_text(
            json.dumps(_decision_to_dict(record.decision), indent=2), encoding="utf-8"
        )
    (task_dir / "trace.json").write_text(
        json.dumps(trace_to_dict(trace), indent=2), encoding="utf-8"
    )
    return task_dir


def load_trace(task_dir: Path) -> RunTrace:
    """Rebuild a trace from trace.json plus the round image files."""
    task_dir = Path(task_dir)
    data = json.loads((task_dir / "trace.json").read_text(encoding="utf-8"))

    ledger = BudgetLedger()
    from .gateway import TokenUsage  # local to avoid an import cycle at module load

    for entry in data["ledger"]:
        ledger.record(
            entry["round"],
            entry["agent"],
            TokenUsage(entry["prompt_tokens"], entry["completion_tokens"]),
            entry["estimated"],
        )

    rounds = []
    for rd in data["rounds"]:
        prog = rd["program"]
        program = GeneratedProgram(
            source=prog["source"],
            round=prog["round"],
            raw_model_text=prog.get("raw_model_text", ""),
            parent_round=prog.get("parent_round"),
        )
        image = None
        if rd["render"]["status"] == "success":
            image_path = task_dir / f"round_{rd['round']}" / "chart.png"
            image = image_path.read_bytes() if image_path.is_file() else None
        status = rd["render"]["status"]
        if status == "success" and image is None:
            # Image file lost; degrade so the outcome invariant still holds.
            status = "no_image"
        render = RenderOutcome(
            status=status,
            image=image,
            stdout=rd["render"]["stdout"],
            stderr=rd["render"]["stderr"],
            duration=rd["render"]["duration"],
        )
        dec = rd["decision"]
        decision = PassDecision(
            passed=dec["passed"],
            scores=VerifierScores(
                dec["scores"]["color"], dec["scores"]["text"], dec["scores"]["structure"]
            ),
            threshold_used=dec["threshold_used"],
            round=dec["round"],
        )
        visual = rd.get("visual_critique")
        code = rd.get("code_critique")
        rounds.append(
            RoundRecord(
                round=rd["round"],
                program=program,
                render=render,
                decision=decision,
                visual_critique=None
                if visual is None
                else VisualCritique(
                    text=visual["text"],
                    render_failed=visual["render_failed"],
                    failure_note=visual["failure_note"],
                ),
                code_critique=None if code is None else CodeCritique(text=code["text"]),
                revision_failed=rd.get("revision_failed", False),
                eval_score=rd.get("eval_score"),
            )
        )

    final = data.get("final_program")
    final_program = None
    if final is not None:
        final_program = GeneratedProgram(
            source=final["source"],
            round=final["round"],
            raw_model_text=final.get("raw_model_text", ""),
            parent_round=final.get("parent_round"),
        )
    return RunTrace(
        task_id=data["task_id"],
        method=data["method"],
        rounds=tuple(rounds),
        stopped_early=data["stopped_early"],
        final_program=final_program,
        ledger=ledger,
    )


def write_run_summary(run_dir: Path, config_snapshot: dict, summaries: list[dict]) -> None:
    payload = {"config": config_snapshot, "tasks": summaries}
    (Path(run_dir) / "run.json").write_text(
        json.dumps(payload, indent=2, default=str), encoding="utf-8"
    )


def write_f1_csv(
    path: Path, reports: Sequence[EvaluationReport], excluded: Sequence[str] = ()
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "text_f1", "type_f1", "color_f1", "layout_f1", "average"])
        for report in reports:
            writer.writerow(
                [report.task_id]
                + [f"{report.facets[f].f1:.6f}" for f in FACETS]
                + [f"{report.average_f1:.6f}"]
            )
        if reports:
            means = {
                f: sum(r.facets[f].f1 for r in reports) / len(reports) for f in FACETS
            }
            overall = sum(r.average_f1 for r in reports) / len(reports)
            writer.writerow(
                ["MEAN"] + [f"{means[f]:.6f}" for f in FACETS] + [f"{overall:.6f}"]
            )
        for task_id in excluded:
            writer.writerow([task_id, "EXCLUDED", "", "", "", ""])


def write_scaling_csv(path: Path, buckets: Sequence[ScalingBucket]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["log2_tokens", "mean_best_score", "n_tasks"])
        for bucket in buckets:
            writer.writerow(
                [bucket.log2_tokens, f"{bucket.mean_best_score:.6f}", bucket.n_tasks]
            )


_PLOT_SCRIPT = '''"""Standalone plot of the scaling report: score vs log2 token budget."""

import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

csv_path = Path(sys.argv[1] if len(sys.argv) > 1 else {csv_name!r})
xs, ys = [], []
with csv_path.open() as fh:
    for row in csv.DictReader(fh):
        xs.append(int(row["log2_tokens"]))
        ys.append(float(row["mean_best_score"]))

fig, ax = plt.subplots(figsize=(5, 3.2), dpi=120)
ax.plot(xs, ys, marker="o")
ax.set_xlabel("log2 completion-token budget")
ax.set_ylabel("mean best score")
ax.set_title("Test-time scaling")
ax.grid(True, alpha=0.3)
fig.tight_layout()
fig.savefig("scaling.png")
print("wrote scaling.png")
'''


def write_scaling_plot_script(path: Path, csv_name: str = "scaling.csv") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_PLOT_SCRIPT.format(csv_name=csv_name), encoding="utf-8")
