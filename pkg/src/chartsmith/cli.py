"""Command-line interface: run single tasks, benchmarks, and reports.

Commands:
    run              one task through a chosen method
    bench            a dataset directory through a method, plus F1 reports
    report-scaling   merge run directories into a scaling CSV and plot script
    fixtures-verify  hermetic self-check of the built-in fixture corpus
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import storage
from .agents import SamplingConfig, TemplateSet
from .config import RunConfig, load_config
from .corpus import builtin_corpus_dir, load_corpus, load_task
from .errors import (
    AgentChainError,
    ChartsmithError,
    ConfigError,
    GoldRenderError,
    TaskLoadError,
)
from .evaluator import aggregate, evaluate_task, scaling_series
from .gateway import API_KEY_ENV, ChatResponse, HttpBackend, ScriptedBackend, TokenUsage
from .orchestrator import ChartTask, LoopConfig, RunDeps, RunTrace, run_method
from .renderer import RenderLimits, render_traced
from .verifier import CommandOcr, FixtureOcr, ThresholdSchedule

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_TASK = 2
EXIT_RUN = 3

METHOD_CHOICES = ("metal", "direct", "hint", "best_of_n", "metal_v", "metal_c", "metal_s")


def _load_scripted(path: str) -> ScriptedBackend:
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    script = [
        ChatResponse(
            text=e["text"],
            usage=TokenUsage(
                int(e.get("prompt_tokens", 0)), int(e.get("completion_tokens", 0))
            ),
        )
        for e in entries
    ]
    return ScriptedBackend(script)


def build_backend(config: RunConfig):
    if config.model.backend == "scripted":
        return _load_scripted(config.model.script_path)
    return HttpBackend(
        base_url=config.model.base_url,
        api_key=os.environ.get(API_KEY_ENV),
    )


def build_deps(config: RunConfig, dataset_dir: Path | None = None) -> RunDeps:
    templates = TemplateSet.builtin()
    backend = build_backend(config)

    if config.ocr.backend == "command":
        ocr = CommandOcr(config.ocr.command)
    else:
        roots = [builtin_corpus_dir()]
        if dataset_dir is not None:
            roots.append(dataset_dir)
        ocr = FixtureOcr(roots)

    agent_backends = {}
    agent_model_ids = {}
    for agent, override in config.model.agents.items():
        if "base_url" in override:
            agent_backends[agent] = HttpBackend(
                base_url=override["base_url"], api_key=os.environ.get(API_KEY_ENV)
            )
        if "model_id" in override:
            agent_model_ids[agent] = override["model_id"]

    return RunDeps(
        templates=templates,
        backend=backend,
        ocr=ocr,
        agent_backends=agent_backends,
        model_id=config.model.model_id,
        agent_model_ids=agent_model_ids,
        render_command=config.render.command,
        render_limits=RenderLimits(
            timeout=config.render.timeout,
            max_output_bytes=config.render.max_output_bytes,
        ),
        keep_artifacts=config.render.keep_artifacts,
    )


def build_loop_config(config: RunConfig) -> LoopConfig:
    return LoopConfig(
        t_max=config.loop.t_max,
        variant=config.loop.variant,
        schedule=ThresholdSchedule(
            mode=config.verifier.mode,
            base_threshold=config.verifier.threshold,
            decay_per_round=config.verifier.decay,
        ),
        sampling=SamplingConfig(
            model_id=config.model.model_id,
            generation_temperature=config.sampling.generation_temperature,
            critique_temperature=config.sampling.critique_temperature,
            revision_temperature=config.sampling.revision_temperature,
            generation_max_tokens=config.sampling.generation_max_tokens,
            critique_max_tokens=config.sampling.critique_max_tokens,
            revision_max_tokens=config.sampling.revision_max_tokens,
        ),
        paper_order=config.loop.paper_order,
        return_last=config.loop.return_last,
    )


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> None:
    if getattr(args, "t_max", None) is not None:
        config.loop.t_max = args.t_max
    if getattr(args, "paper_order", False):
        config.loop.paper_order = True
    if getattr(args, "n", None) is not None:
        config.bench.n = args.n
    if getattr(args, "workers", None) is not None:
        config.render.workers = args.workers
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "out", None) is not None:
        config.output.dir = args.out
    config.validate()


def _print_scores(trace: RunTrace) -> None:
    for record in trace.rounds:
        s = record.decision.scores
        print(
            f"  round {record.round}: color={s.color:.4f} text={s.text:.4f} "
            f"structure={s.structure:.4f} mean={s.mean:.4f} "
            f"passed={record.decision.passed}"
        )
    print(
        f"  stopped_early={trace.stopped_early} rounds={len(trace.rounds)} "
        f"completion_tokens={trace.ledger.cumulative_completion()}"
    )


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
        _apply_overrides(config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        task = load_task(args.task)
    except TaskLoadError as exc:
        print(f"task error: {exc}", file=sys.stderr)
        return EXIT_TASK

    random.seed(config.seed)
    deps = build_deps(config, dataset_dir=Path(args.task).parent)
    loop_cfg = build_loop_config(config)
    run_dir = Path(config.output.dir) / "runs" / args.run_id

    try:
        trace = run_method(task, args.method, loop_cfg, deps, n=config.bench.n)
    except AgentChainError as exc:
        if exc.partial_trace is not None:
            storage.persist_trace(run_dir, exc.partial_trace)
        print(f"run error: {exc}", file=sys.stderr)
        return EXIT_RUN
    except ChartsmithError as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return EXIT_RUN

    storage.persist_trace(run_dir, trace)
    storage.write_run_summary(
        run_dir, config.snapshot(), [_task_summary(trace)]
    )
    print(f"{task.task_id} [{args.method}]")
    _print_scores(trace)
    return EXIT_OK


def _task_summary(trace: RunTrace) -> dict:
    best = max((r.decision.scores.mean for r in trace.rounds), default=0.0)
    return {
        "task_id": trace.task_id,
        "method": trace.method,
        "rounds": len(trace.rounds),
        "stopped_early": trace.stopped_early,
        "best_mean_score": best,
        "completion_tokens": trace.ledger.cumulative_completion(),
    }


def _run_one_bench_task(
    task: ChartTask, args, loop_cfg: LoopConfig, deps: RunDeps, run_dir: Path, n: int
) -> tuple[str, RunTrace | None, str | None]:
    task_dir = run_dir / task.task_id
    if args.resume and (task_dir / "trace.json").is_file():
        return task.task_id, storage.load_trace(task_dir), None
    try:
        trace = run_method(task, args.method, loop_cfg, deps, n=n)
    except AgentChainError as exc:
        if exc.partial_trace is not None:
            storage.persist_trace(run_dir, exc.partial_trace)
        return task.task_id, None, str(exc)
    storage.persist_trace(run_dir, trace)
    return task.task_id, trace, None


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
        _apply_overrides(config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        tasks = load_corpus(args.dataset)
    except TaskLoadError as exc:
        print(f"task error: {exc}", file=sys.stderr)
        return EXIT_TASK

    random.seed(config.seed)
    dataset_dir = Path(args.dataset)
    deps = build_deps(config, dataset_dir=dataset_dir)
    loop_cfg = build_loop_config(config)
    run_dir = Path(config.output.dir) / "runs" / args.run_id
    workers = config.render.effective_workers()

    results: list[tuple[str, RunTrace | None, str | None]] = []
    if workers <= 1:
        for task in tasks:
            results.append(
                _run_one_bench_task(task, args, loop_cfg, deps, run_dir, config.bench.n)
            )
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(
                    _run_one_bench_task, task, args, loop_cfg, deps, run_dir, config.bench.n
                )
                for task in tasks
            ]
            results = [f.result() for f in futures]

    failed = [task_id for task_id, trace, err in results if trace is None]
    for task_id, _, err in results:
        if err:
            print(f"  {task_id}: FAILED ({err})", file=sys.stderr)

    # Element-level evaluation wherever a gold program exists.
    reports = []
    excluded = []
    tasks_by_id = {t.task_id: t for t in tasks}
    renderer = lambda src: render_traced(  # noqa: E731
        _as_program(src),
        limits=deps.render_limits,
        command=deps.render_command,
    )
    for task_id, trace, _ in results:
        if trace is None or trace.final_program is None:
            continue
        task = tasks_by_id[task_id]
        if task.gold_program is None:
            continue
        try:
            report = evaluate_task(
                task.gold_program,
                trace.final_program.source,
                renderer,
                task_id=task_id,
            )
            reports.append(report)
        except GoldRenderError as exc:
            logger.warning("task %s excluded: %s", task_id, exc)
            excluded.append(task_id)

    report_dir = Path(config.output.dir) / "reports" / args.run_id
    if reports:
        storage.write_f1_csv(report_dir / "f1.csv", reports, excluded)
        summary = aggregate(reports, excluded)
        print(f"\n{'':12s}  text    type    color   layout  average")
        for report in reports:
            row = "  ".join(f"{report.facets[f].f1:.4f}" for f in ("text", "type", "color", "layout"))
            print(f"{report.task_id:12s}  {row}  {report.average_f1:.4f}")
        mean_row = "  ".join(
            f"{summary.facet_means[f]:.4f}" for f in ("text", "type", "color", "layout")
        )
        print(f"{'MEAN':12s}  {mean_row}  {summary.overall_average:.4f}")
        if excluded:
            print(f"excluded (gold render failure): {', '.join(excluded)}")

    traces = [trace for _, trace, _ in results if trace is not None]
    storage.write_run_summary(
        run_dir, config.snapshot(), [_task_summary(t) for t in traces]
    )
    return EXIT_RUN if failed else EXIT_OK


def _as_program(source: str):
    from .agents import GeneratedProgram

    return GeneratedProgram(source=source, round=0)


def cmd_report_scaling(args: argparse.Namespace) -> int:
    traces = []
    for run_dir in args.run_dirs:
        run_dir = Path(run_dir)
        if not run_dir.is_dir():
            print(f"run directory not found: {run_dir}", file=sys.stderr)
            return EXIT_TASK
        trace_files = sorted(run_dir.glob("*/trace.json"))
        if not trace_files:
            print(f"no traces found under {run_dir}", file=sys.stderr)
            return EXIT_TASK
        for trace_file in trace_files:
            traces.append(storage.load_trace(trace_file.parent))

    buckets = scaling_series(traces, scorer=args.scorer)
    out_dir = Path(args.out)
    storage.write_scaling_csv(out_dir / "scaling.csv", buckets)
    storage.write_scaling_plot_script(out_dir / "plot_scaling.py")
    for bucket in buckets:
        print(
            f"  2^{bucket.log2_tokens} tokens: mean best score "
            f"{bucket.mean_best_score:.4f} over {bucket.n_tasks} task(s)"
        )
    print(f"wrote {out_dir / 'scaling.csv'} and {out_dir / 'plot_scaling.py'}")
    return EXIT_OK


def cmd_fixtures_verify(args: argparse.Namespace) -> int:
    from .verifier import color_score, structure_score, text_score

    corpus_dir = builtin_corpus_dir()
    try:
        tasks = load_corpus(corpus_dir)
    except TaskLoadError as exc:
        print(f"fixture corpus broken: {exc}", file=sys.stderr)
        return EXIT_RUN

    ocr = FixtureOcr([corpus_dir])
    failures = []
    for task in tasks:
        image = task.reference_image
        try:
            checks = {
                "color": color_score(image, image),
                "text": text_score(
                    image, image, ocr, gen_source=task.reference_path,
                    ref_source=task.reference_path,
                ),
                "structure": structure_score(image, image),
            }
        except Exception as exc:  # corrupt fixture data
            failures.append(f"{task.task_id}: {exc}")
            continue
        for name, value in checks.items():
            if value != 1.0:
                failures.append(f"{task.task_id}: self-{name} score {value} != 1.0")

    if failures:
        for failure in failures:
            print(f"FIXTURE FAILURE {failure}", file=sys.stderr)
        return EXIT_RUN
    print(f"fixtures ok: {len(tasks)} tasks verified")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="TOML config file")
    parser.add_argument("--out", default=None, help="output root directory")
    parser.add_argument("--run-id", default="run", help="run identifier")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--t-max", type=int, default=None, dest="t_max")
    parser.add_argument("--n", type=int, default=None, help="best-of-n candidates")
    parser.add_argument(
        "--paper-order",
        action="store_true",
        dest="paper_order",
        help="spend all four agent calls every iteration",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chartsmith",
        description="Chart-to-code generation with iterative multi-agent refinement",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one task")
    p_run.add_argument("task", help="task directory")
    p_run.add_argument("--method", choices=METHOD_CHOICES, default="metal")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_bench = sub.add_parser("bench", help="run a dataset")
    p_bench.add_argument("dataset", help="dataset directory of task subdirectories")
    p_bench.add_argument("--method", choices=METHOD_CHOICES, default="metal")
    p_bench.add_argument("--resume", action="store_true")
    _add_common(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    p_scale = sub.add_parser("report-scaling", help="scaling curve across runs")
    p_scale.add_argument("run_dirs", nargs="+", help="run directories holding traces")
    p_scale.add_argument("--out", default="reports/scaling")
    p_scale.add_argument(
        "--scorer", choices=("verifier_avg", "eval_f1"), default="verifier_avg"
    )
    p_scale.set_defaults(func=cmd_report_scaling)

    p_fix = sub.add_parser("fixtures-verify", help="verify the built-in fixtures")
    p_fix.set_defaults(func=cmd_fixtures_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
