"""The four refinement agents, their prompt templates, and reply parsing.

Generation and visual critique are multimodal; code critique and revision
are text-only. A unified-critique agent (both critiques in one call) and a
hint describer (chart description for hint-augmented generation) round out
the set. Each agent is a pure function over (templates, backend).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import CodeExtractionError
from .gateway import Backend, ChatMessage, ChatRequest, ContentPart, complete
from .renderer import RenderOutcome

logger = logging.getLogger(__name__)

AGENT_KINDS = (
    "generation",
    "visual_critique",
    "code_critique",
    "revision",
    "unified_critique",
    "hint_describer",
)

ALLOWED_PLACEHOLDERS = frozenset(
    {"instruction", "code", "visual_feedback", "code_feedback", "hint"}
)

UNIFIED_DELIMITER = "---CODE CRITIQUE---"
NA_SENTINEL = "N/A"

_PLACEHOLDER_RE = re.compile(
    r"\{(instruction|code|visual_feedback|code_feedback|hint)\}"
)
_ANY_SLOT_RE = re.compile(r"\{([a-zA-Z_][a-zA-Z0-9_]*)\}")


@dataclass(frozen=True)
class PromptTemplate:
    """One agent's prompt body with `{placeholder}` slots."""

    agent: str
    body: str

    def __post_init__(self):
        if self.agent not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.agent!r}")
        found = set(_ANY_SLOT_RE.findall(self.body))
        if not found <= ALLOWED_PLACEHOLDERS:
            raise ValueError(
                f"illegal placeholders in template: {sorted(found - ALLOWED_PLACEHOLDERS)}"
            )

    def render(self, **values: str) -> str:
        """Substitute placeholders; every slot in the body must be filled."""
        text = self.body
        for key, value in values.items():
            if key not in ALLOWED_PLACEHOLDERS:
                raise ValueError(f"unknown placeholder {key!r}")
            text = text.replace("{" + key + "}", value)
        leftover = _PLACEHOLDER_RE.findall(text)
        if leftover:
            raise ValueError(f"unsubstituted placeholders remain: {leftover}")
        return text


@dataclass(frozen=True)
class TemplateSet:
    """All six agent templates, loaded from a prompt-asset directory."""

    templates: dict[str, PromptTemplate]

    def __post_init__(self):
        missing = [k for k in AGENT_KINDS if k not in self.templates]
        if missing:
            raise ValueError(f"missing templates for agents: {missing}")

    def get(self, agent: str) -> PromptTemplate:
        return self.templates[agent]

    @classmethod
    def load(cls, directory: Path | str) -> "TemplateSet":
        directory = Path(directory)
        templates = {}
        for kind in AGENT_KINDS:
            path = directory / f"{kind}.txt"
            if not path.is_file():
                raise FileNotFoundError(f"prompt asset missing: {path}")
            templates[kind] = PromptTemplate(kind, path.read_text(encoding="utf-8"))
        return cls(templates)

    @classmethod
    def builtin(cls) -> "TemplateSet":
        return cls.load(Path(__file__).parent / "prompts")


@dataclass(frozen=True)
class SamplingConfig:
    """Per-agent request parameters. Critiques decode greedily by default."""

    model_id: str = "default"
    generation_temperature: float = 0.2
    critique_temperature: float = 0.0
    revision_temperature: float = 0.2
    generation_max_tokens: int = 2048
    critique_max_tokens: int = 600
    revision_max_tokens: int = 600


@dataclass(frozen=True)
class GeneratedProgram:
    """Chart source code plus provenance of the round that produced it."""

    source: str
    round: int
    raw_model_text: str = ""
    parent_round: int | None = None

    def __post_init__(self):
        if not self.source:
            raise ValueError("program source must be non-empty")
        if self.round < 0:
            raise ValueError("round must be non-negative")
        if self.round == 0 and self.parent_round is not None:
            raise ValueError("round 0 has no parent")
        if self.round > 0 and self.parent_round != self.round - 1:
            raise ValueError("round t must have parent_round == t - 1")


@dataclass(frozen=True)
class VisualCritique:
    text: str
    render_failed: bool = False
    failure_note: str | None = None

    def __post_init__(self):
        if self.render_failed and not self.failure_note:
            raise ValueError("render-failure critiques must carry a failure note")


@dataclass(frozen=True)
class CodeCritique:
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("code critique must be non-empty")


_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)
_HEADER_PREFIXES = ("import ", "from ", "#!", "def ", "class ")


def extract_code(model_text: str) -> str:
    """Return the first fenced code block, or the whole text when it
    already starts like a program (import line etc.)."""
    match = _FENCE_RE.search(model_text)
    if match:
        code = match.group(1).strip("\n")
        if code.strip():
            return code
        raise CodeExtractionError("first fenced block is empty")
    stripped = model_text.lstrip()
    if stripped.startswith(_HEADER_PREFIXES):
        return model_text.strip("\n")
    raise CodeExtractionError("no code block found in model reply")


def _ask(
    backend: Backend,
    parts: list[ContentPart],
    sampling: SamplingConfig,
    max_tokens: int,
    temperature: float,
) -> str:
    request = ChatRequest(
        model_id=sampling.model_id,
        messages=(ChatMessage.user(parts),),
        max_tokens=max_tokens,
        temperature=temperature,
    )
    return complete(backend, request).text


def generate(
    reference: bytes,
    instruction: str | None,
    templates: TemplateSet,
    backend: Backend,
    sampling: SamplingConfig = SamplingConfig(),
    hint: str | None = None,
) -> GeneratedProgram:
    """Initial program from the reference image (round 0)."""
    prompt = templates.get("generation").render(
        instruction=instruction or NA_SENTINEL,
        hint=hint or NA_SENTINEL,
    )
    reply = _ask(
        backend,
        [ContentPart.from_text(prompt), ContentPart.from_image(reference)],
        sampling,
        sampling.generation_max_tokens,
        sampling.generation_temperature,
    )
    return GeneratedProgram(source=extract_code(reply), round=0, raw_model_text=reply)


def critique_visual(
    rendered: RenderOutcome,
    reference: bytes,
    templates: TemplateSet,
    backend: Backend,
    sampling: SamplingConfig = SamplingConfig(),
) -> VisualCritique:
    """Visual diff of rendered vs reference.

    A failed render bypasses the model entirely: the execution error is
    fed back as the critique so the revision agent can repair the crash.
    """
    if rendered.status != "success" or rendered.image is None:
        note = rendered.stderr.strip() or f"render ended with status {rendered.status}"
        text = (
            "The program did not produce a chart; fix the execution failure "
            f"before visual polish. Render status: {rendered.status}.\n"
            f"Captured error output:\n{note}"
        )
        return VisualCritique(text=text, render_failed=True, failure_note=note)

    prompt = templates.get("visual_critique").render()
    reply = _ask(
        backend,
        [
            ContentPart.from_text(prompt),
            ContentPart.from_image(rendered.image),
            ContentPart.from_image(reference),
        ],
        sampling,
        sampling.critique_max_tokens,
        sampling.critique_temperature,
    )
    return VisualCritique(text=reply)


def critique_code(
    program: GeneratedProgram,
    templates: TemplateSet,
    backend: Backend,
    sampling: SamplingConfig = SamplingConfig(),
) -> CodeCritique:
    """Text-only review of the program source."""
    prompt = templates.get("code_critique").render(code=program.source)
    reply = _ask(
        backend,
        [ContentPart.from_text(prompt)],
        sampling,
        sampling.critique_max_tokens,
        sampling.critique_temperature,
    )
    return CodeCritique(text=reply)


def revise(
    program: GeneratedProgram,
    visual: VisualCritique | None,
    code: CodeCritique | None,
    templates: TemplateSet,
    backend: Backend,
    sampling: SamplingConfig = SamplingConfig(),
) -> GeneratedProgram:
    """Next-round program integrating whichever critiques are present."""
    if visual is None and code is None:
        raise ValueError("revision needs at least one critique")
    prompt = templates.get("revision").render(
        code=program.source,
        visual_feedback=visual.text if visual else NA_SENTINEL,
        code_feedback=code.text if code else NA_SENTINEL,
    )
    reply = _ask(
        backend,
        [ContentPart.from_text(prompt)],
        sampling,
        sampling.revision_max_tokens,
        sampling.revision_temperature,
    )
    return GeneratedProgram(
        source=extract_code(reply),
        round=program.round + 1,
        raw_model_text=reply,
        parent_round=program.round,
    )


def critique_unified(
    rendered: RenderOutcome,
    reference: bytes,
    program: GeneratedProgram,
    templates: TemplateSet,
    backend: Backend,
    sampling: SamplingConfig = SamplingConfig(),
) -> tuple[VisualCritique, CodeCritique]:
    """Single-call critique split at the mandated delimiter line.

    A missing delimiter degrades gracefully: the whole reply becomes the
    visual critique and the code critique is the N/A sentinel.
    """
    prompt = templates.get("unified_critique").render(code=program.source)
    parts = [ContentPart.from_text(prompt)]
    if rendered.status == "success" and rendered.image is not None:
        parts.append(ContentPart.from_image(rendered.image))
    else:
        note = rendered.stderr.strip() or f"render ended with status {rendered.status}"
        parts[0] = ContentPart.from_text(
            prompt + f"\n\nThe candidate render failed; error output:\n{note}"
        )
    parts.append(ContentPart.from_image(reference))

    reply = _ask(
        backend,
        parts,
        sampling,
        sampling.critique_max_tokens,
        sampling.critique_temperature,
    )
    if UNIFIED_DELIMITER in reply:
        visual_part, code_part = reply.split(UNIFIED_DELIMITER, 1)
    else:
        logger.warning("unified critique reply lacked the delimiter line")
        visual_part, code_part = reply, NA_SENTINEL
    return (
        VisualCritique(text=visual_part.strip() or NA_SENTINEL),
        CodeCritique(text=code_part.strip() or NA_SENTINEL),
    )


def describe_hint(
    reference: bytes,
    templates: TemplateSet,
    backend: Backend,
    sampling: SamplingConfig = SamplingConfig(),
) -> str:
    """Short self-generated description of the reference chart."""
    prompt = templates.get("hint_describer").render()
    return _ask(
        backend,
        [ContentPart.from_text(prompt), ContentPart.from_image(reference)],
        sampling,
        sampling.critique_max_tokens,
        sampling.critique_temperature,
    )
