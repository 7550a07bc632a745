"""Shared test fixtures: canvases, scripted responses, fake run pieces."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from chartsmith.agents import GeneratedProgram, TemplateSet
from chartsmith.gateway import ChatResponse, ScriptedBackend, TokenUsage
from chartsmith.orchestrator import ChartTask
from chartsmith.renderer import RenderOutcome
from chartsmith.verifier import PassDecision, VerifierScores

CORPUS_DIR = Path(__file__).resolve().parents[1] / "src" / "chartsmith" / "fixtures" / "tasks"


def png_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array.astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def solid_canvas(rgb: tuple[int, int, int], width: int = 32, height: int = 32) -> bytes:
    arr = np.zeros((height, width, 3), dtype=np.uint8)
    arr[:, :] = rgb
    return png_bytes(arr)


def split_canvas(
    left: tuple[int, int, int], right: tuple[int, int, int], width: int = 32, height: int = 32
) -> bytes:
    arr = np.zeros((height, width, 3), dtype=np.uint8)
    arr[:, : width // 2] = left
    arr[:, width // 2 :] = right
    return png_bytes(arr)


def resp(text: str, prompt: int = 10, completion: int = 20, estimated: bool = False) -> ChatResponse:
    return ChatResponse(
        text=text, usage=TokenUsage(prompt, completion), usage_estimated=estimated
    )


def code_reply(source: str = "import matplotlib\nprint('hi')") -> str:
    return f"```python\n{source}\n```"


def success_outcome(image: bytes, duration: float = 0.01) -> RenderOutcome:
    return RenderOutcome(
        status="success", image=image, stdout="", stderr="", duration=duration
    )


def failed_outcome(stderr: str = "Traceback: RuntimeError: boom") -> RenderOutcome:
    return RenderOutcome(
        status="runtime_error", image=None, stdout="", stderr=stderr, duration=0.01
    )


def decision(passed: bool, mean: float, round: int, threshold: float = 0.9) -> PassDecision:
    value = min(1.0, max(0.0, mean))
    return PassDecision(
        passed=passed,
        scores=VerifierScores(value, value, value),
        threshold_used=threshold,
        round=round,
    )


def make_scorer(pass_at: int | None, means: list[float] | None = None):
    """Deterministic stand-in for the verifier composition."""

    def scorer(outcome: RenderOutcome, round: int) -> PassDecision:
        mean = means[round] if means is not None else (1.0 if round == pass_at else 0.5)
        return decision(pass_at is not None and round >= pass_at, mean, round)

    return scorer


def make_render_fn(image: bytes | None = None):
    payload = image or solid_canvas((255, 255, 255))

    def render_fn(program: GeneratedProgram) -> RenderOutcome:
        return success_outcome(payload)

    return render_fn


class NullOcr:
    def extract(self, image: bytes, source=None) -> list[str]:
        return []


@pytest.fixture(scope="session")
def templates() -> TemplateSet:
    return TemplateSet.builtin()


@pytest.fixture()
def white_task() -> ChartTask:
    return ChartTask(task_id="t-white", reference_image=solid_canvas((255, 255, 255)))


@pytest.fixture(scope="session")
def corpus_dir() -> Path:
    return CORPUS_DIR


def scripted(*texts_or_responses) -> ScriptedBackend:
    script = [
        t if isinstance(t, ChatResponse) else resp(t) for t in texts_or_responses
    ]
    return ScriptedBackend(script)
