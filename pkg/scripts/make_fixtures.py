#!/usr/bin/env python3
"""Build the built-in fixture corpus.

Each fixture task gets a gold program, a reference image rendered from
that program, an OCR sidecar listing the drawn text, and optionally an
instruction. Gold programs write their own element-trace sidecar when
CHARTSMITH_TRACE_OUT is set, so traced evaluation works without any
instrumentation package installed.

Run from the repository root:  python3 scripts/make_fixtures.py
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from chartsmith.agents import GeneratedProgram
from chartsmith.renderer import RenderLimits, render, render_traced
from chartsmith.verifier import FixtureOcr, color_score, structure_score, text_score

CORPUS_DIR = Path(__file__).resolve().parents[1] / "src" / "chartsmith" / "fixtures" / "tasks"

_HEADER = """\
import json
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
"""

_TRACE_BLOCK = """
_out = os.environ.get("CHARTSMITH_TRACE_OUT")
if _out:
    with open(_out, "w") as fh:
        json.dump({trace!r}, fh)
"""


def _program(body: str, trace: dict, save: bool = True) -> str:
    script = _HEADER + "\n" + body.strip() + "\n"
    if save:
        script += 'fig.savefig("chart.png")\n'
    script += _TRACE_BLOCK.replace("{trace!r}", repr(trace))
    return script


FIXTURES: dict[str, dict] = {
    "task01_bar": {
        "instruction": "Recreate the quarterly sales bar chart.",
        "texts": ["Sales", "Q1", "Q2", "Q3", "Q4"],
        "body": """
fig, ax = plt.subplots(figsize=(3.2, 2.4), dpi=80)
ax.bar(["Q1", "Q2", "Q3", "Q4"], [3, 5, 2, 4], color="#1f77b4")
ax.set_title("Sales")
""",
        "trace": {
            "texts": ["Sales", "Q1", "Q2", "Q3", "Q4"],
            "chart_types": ["bar"],
            "colors": ["#1f77b4"],
            "layout": [[1, 1, 1]],
        },
    },
    "task02_line": {
        "instruction": "Two trend lines with a legend.",
        "texts": ["Signal Trends", "time", "value", "alpha", "beta"],
        "body": """
fig, ax = plt.subplots(figsize=(3.2, 2.4), dpi=80)
xs = [0, 1, 2, 3, 4]
ax.plot(xs, [1, 3, 2, 5, 4], color="#d62728", label="alpha")
ax.plot(xs, [2, 2, 4, 3, 5], color="#2ca02c", label="beta")
ax.set_title("Signal Trends")
ax.set_xlabel("time")
ax.set_ylabel("value")
ax.legend()
""",
        "trace": {
            "texts": ["Signal Trends", "time", "value", "alpha", "beta"],
            "chart_types": ["line", "line"],
            "colors": ["#d62728", "#2ca02c"],
            "layout": [[1, 1, 1]],
        },
    },
    "task03_scatter": {
        "texts": ["Cluster View"],
        "body": """
fig, ax = plt.subplots(figsize=(3.2, 2.4), dpi=80)
ax.scatter([1, 2, 3, 4, 5, 2.5], [2, 4, 1, 5, 3, 2.2], color="#9467bd")
ax.set_title("Cluster View")
""",
        "trace": {
            "texts": ["Cluster View"],
            "chart_types": ["scatter"],
            "colors": ["#9467bd"],
            "layout": [[1, 1, 1]],
        },
    },
    "task04_pie": {
        "instruction": "Pie chart of market share.",
        "texts": ["Market Share", "north", "south", "east", "west"],
        "body": """
fig, ax = plt.subplots(figsize=(3.0, 2.6), dpi=80)
ax.pie(
    [40, 30, 20, 10],
    labels=["north", "south", "east", "west"],
    colors=["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"],
)
ax.set_title("Market Share")
""",
        "trace": {
            "texts": ["Market Share", "north", "south", "east", "west"],
            "chart_types": ["pie"],
            "colors": ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"],
            "layout": [[1, 1, 1]],
        },
    },
    "task05_hist": {
        "texts": ["Latency Histogram", "ms"],
        "body": """
fig, ax = plt.subplots(figsize=(3.2, 2.4), dpi=80)
values = [1, 2, 2, 3, 3, 3, 4, 4, 4, 4, 5, 5, 6, 7, 8, 8, 9]
ax.hist(values, bins=5, color="#8c564b")
ax.set_title("Latency Histogram")
ax.set_xlabel("ms")
""",
        "trace": {
            "texts": ["Latency Histogram", "ms"],
            "chart_types": ["hist"],
            "colors": ["#8c564b"],
            "layout": [[1, 1, 1]],
        },
    },
    "task06_grid": {
        "instruction": "A 2x2 grid using the first and last cells.",
        "texts": ["Counts", "Drift"],
        "body": """
fig = plt.figure(figsize=(3.6, 2.8), dpi=80)
ax1 = fig.add_subplot(2, 2, 1)
ax1.bar(["a", "b"], [2, 3], color="#1f77b4")
ax1.set_title("Counts")
ax4 = fig.add_subplot(2, 2, 4)
ax4.plot([0, 1, 2], [1, 0, 2], color="#ff7f0e")
ax4.set_title("Drift")
""",
        "trace": {
            "texts": ["Counts", "Drift", "a", "b"],
            "chart_types": ["bar", "line"],
            "colors": ["#1f77b4", "#ff7f0e"],
            "layout": [[2, 2, 1], [2, 2, 4]],
        },
    },
    "task07_barh": {
        "texts": ["Top Regions", "apac", "emea", "amer"],
        "body": """
fig, ax = plt.subplots(figsize=(3.2, 2.4), dpi=80)
ax.barh(["apac", "emea", "amer"], [4, 6, 5], color="#17becf")
ax.set_title("Top Regions")
""",
        "trace": {
            "texts": ["Top Regions", "apac", "emea", "amer"],
            "chart_types": ["barh"],
            "colors": ["#17becf"],
            "layout": [[1, 1, 1]],
        },
    },
    "task08_area": {
        "texts": ["Cumulative Load"],
        "body": """
fig, ax = plt.subplots(figsize=(3.2, 2.4), dpi=80)
xs = [0, 1, 2, 3, 4, 5]
ax.fill_between(xs, [0, 1, 3, 4, 6, 9], color="#bcbd22")
ax.set_title("Cumulative Load")
""",
        "trace": {
            "texts": ["Cumulative Load"],
            "chart_types": ["area"],
            "colors": ["#bcbd22"],
            "layout": [[1, 1, 1]],
        },
    },
    "task09_heatmap": {
        "texts": ["Intensity Map"],
        "body": """
fig, ax = plt.subplots(figsize=(3.0, 2.6), dpi=80)
grid = [[1, 2, 3], [4, 5, 6], [7, 8, 9]]
ax.imshow(grid, cmap="viridis")
ax.set_title("Intensity Map")
""",
        "trace": {
            "texts": ["Intensity Map"],
            "chart_types": ["heatmap"],
            "colors": [],
            "layout": [[1, 1, 1]],
        },
    },
    "task10_box": {
        "texts": ["Spread by Group"],
        "save": False,
        "body": """
fig, ax = plt.subplots(figsize=(3.2, 2.4), dpi=80)
ax.boxplot([[1, 2, 3, 4, 9], [2, 3, 3, 4, 5]])
ax.set_title("Spread by Group")
""",
        "trace": {
            "texts": ["Spread by Group"],
            "chart_types": ["box"],
            "colors": [],
            "layout": [[1, 1, 1]],
        },
    },
    "task11_step": {
        "texts": ["State Changes"],
        "body": """
fig, ax = plt.subplots(figsize=(3.2, 2.4), dpi=80)
ax.step([0, 1, 2, 3, 4], [0, 1, 1, 3, 2], color="#e377c2")
ax.set_title("State Changes")
""",
        "trace": {
            "texts": ["State Changes"],
            "chart_types": ["step"],
            "colors": ["#e377c2"],
            "layout": [[1, 1, 1]],
        },
    },
    "task12_errorbar": {
        "texts": ["Measured Drift"],
        "body": """
fig, ax = plt.subplots(figsize=(3.2, 2.4), dpi=80)
ax.errorbar([1, 2, 3, 4], [2, 3, 2.5, 4], yerr=[0.3, 0.2, 0.4, 0.3], color="#7f7f7f")
ax.set_title("Measured Drift")
""",
        "trace": {
            "texts": ["Measured Drift"],
            "chart_types": ["errorbar"],
            "colors": ["#7f7f7f"],
            "layout": [[1, 1, 1]],
        },
    },
}


def main() -> int:
    CORPUS_DIR.mkdir(parents=True, exist_ok=True)
    limits = RenderLimits(timeout=60.0)

    for task_id, spec in sorted(FIXTURES.items()):
        task_dir = CORPUS_DIR / task_id
        task_dir.mkdir(parents=True, exist_ok=True)
        source = _program(spec["body"], spec["trace"], save=spec.get("save", True))
        program = GeneratedProgram(source=source, round=0)

        first = render(program, limits)
        second = render(program, limits)
        if first.status != "success":
            print(f"{task_id}: render failed: {first.status}\n{first.stderr}")
            return 1
        if first.image != second.image:
            print(f"{task_id}: nondeterministic render output")
            return 1

        outcome, trace = render_traced(program, limits)
        if trace is None:
            print(f"{task_id}: traced render produced no sidecar")
            return 1
        if outcome.image != first.image:
            print(f"{task_id}: traced render changed pixels")
            return 1

        (task_dir / "gold.src").write_text(source, encoding="utf-8")
        (task_dir / "reference.png").write_bytes(first.image)
        (task_dir / "reference.txt").write_text(
            "\n".join(spec["texts"]) + "\n", encoding="utf-8"
        )
        if "instruction" in spec:
            (task_dir / "instruction.txt").write_text(
                spec["instruction"] + "\n", encoding="utf-8"
            )
        print(f"{task_id}: ok ({len(first.image)} bytes, trace {len(trace.texts)} texts)")

    # identity sanity: every fixture scores 1.0 against itself
    ocr = FixtureOcr([CORPUS_DIR])
    for task_id in sorted(FIXTURES):
        ref_path = CORPUS_DIR / task_id / "reference.png"
        data = ref_path.read_bytes()
        cs = color_score(data, data)
        ts = text_score(data, data, ocr, gen_source=ref_path, ref_source=ref_path)
        ss = structure_score(data, data)
        if (cs, ts, ss) != (1.0, 1.0, 1.0):
            print(f"{task_id}: identity scores off: {cs} {ts} {ss}")
            return 1
    print("identity checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
