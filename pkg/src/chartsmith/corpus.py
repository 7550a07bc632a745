"""Task and dataset loading.

A dataset is a directory of task subdirectories, each holding
``reference.png`` (required), ``instruction.txt`` (optional), and
``gold.src`` (optional). A small built-in fixture corpus ships with the
package for hermetic runs and tests.
"""

from __future__ import annotations

from pathlib import Path

from .errors import TaskLoadError
from .orchestrator import ChartTask

REFERENCE_NAME = "reference.png"
INSTRUCTION_NAME = "instruction.txt"
GOLD_NAME = "gold.src"


def builtin_corpus_dir() -> Path:
    return Path(__file__).parent / "fixtures" / "tasks"


def load_task(task_dir: Path | str) -> ChartTask:
    task_dir = Path(task_dir)
    if not task_dir.is_dir():
        raise TaskLoadError(f"task directory not found: {task_dir}")
    reference = task_dir / REFERENCE_NAME
    if not reference.is_file():
        raise TaskLoadError(f"missing {REFERENCE_NAME} in {task_dir}")

    instruction_path = task_dir / INSTRUCTION_NAME
    gold_path = task_dir / GOLD_NAME
    try:
        return ChartTask(
            task_id=task_dir.name,
            reference_image=reference.read_bytes(),
            instruction=instruction_path.read_text(encoding="utf-8").strip()
            if instruction_path.is_file()
            else None,
            gold_program=gold_path.read_text(encoding="utf-8")
            if gold_path.is_file()
            else None,
            reference_path=reference,
        )
    except ValueError as exc:
        raise TaskLoadError(f"bad task data in {task_dir}: {exc}") from exc


def load_corpus(dataset_dir: Path | str) -> list[ChartTask]:
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise TaskLoadError(f"dataset directory not found: {dataset_dir}")
    task_dirs = sorted(p for p in dataset_dir.iterdir() if p.is_dir())
    if not task_dirs:
        raise TaskLoadError(f"dataset directory has no task subdirectories: {dataset_dir}")
    return [load_task(p) for p in task_dirs]
