"""Chart-to-code generation with iterative multi-agent refinement.

A generation agent drafts a chart program from a reference image; visual
and code critique agents review the render and the source; a revision
agent folds the feedback back into the program. A heuristic verifier
(color, text, structure similarity) decides when to stop. An element-level
F1 harness evaluates final programs against gold programs, and a budget
ledger supports test-time-scaling reports.
"""

__version__ = "0.1.0"

from .agents import (
    CodeCritique,
    GeneratedProgram,
    SamplingConfig,
    TemplateSet,
    VisualCritique,
    extract_code,
)
from .errors import ChartsmithError
from .gateway import (
    Backend,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    ContentPart,
    HttpBackend,
    ScriptedBackend,
    TokenUsage,
    complete,
    scripted_backend,
)
from .orchestrator import (
    BudgetLedger,
    ChartTask,
    LoopConfig,
    RoundRecord,
    RunDeps,
    RunTrace,
    run_best_of_n,
    run_direct,
    run_hint,
    run_metal,
    run_method,
    run_variant,
)
from .renderer import ElementTrace, RenderLimits, RenderOutcome, render, render_traced
from .verifier import (
    ColorHistogram,
    PassDecision,
    ThresholdSchedule,
    VerifierScores,
    color_score,
    hsv_histogram,
    raw_ssim,
    score_pair,
    structure_score,
    text_score,
    verify,
)

__all__ = [
    "Backend",
    "BudgetLedger",
    "ChartTask",
    "ChartsmithError",
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "CodeCritique",
    "ColorHistogram",
    "ContentPart",
    "ElementTrace",
    "GeneratedProgram",
    "HttpBackend",
    "LoopConfig",
    "PassDecision",
    "RenderLimits",
    "RenderOutcome",
    "RoundRecord",
    "RunDeps",
    "RunTrace",
    "SamplingConfig",
    "ScriptedBackend",
    "TemplateSet",
    "ThresholdSchedule",
    "TokenUsage",
    "VerifierScores",
    "VisualCritique",
    "color_score",
    "complete",
    "extract_code",
    "hsv_histogram",
    "raw_ssim",
    "render",
    "render_traced",
    "run_best_of_n",
    "run_direct",
    "run_hint",
    "run_metal",
    "run_method",
    "run_variant",
    "score_pair",
    "scripted_backend",
    "structure_score",
    "text_score",
    "verify",
]
