"""Isolated subprocess execution of chart programs.

Each render gets a fresh temporary working directory, a wall-clock
timeout, and capped stdout/stderr capture. A preamble forces a
non-interactive matplotlib backend (and, in traced mode, installs the
element-trace hooks when the tracer package is importable); a postamble
saves the active figure to ``chart.png`` when the script did not save one.
All failure modes are classified into the outcome, never raised.
"""

from __future__ import annotations

import io
import json
import logging
import os
import re
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from PIL import Image

logger = logging.getLogger(__name__)

TRACE_ENV = "CHARTSMITH_TRACE_OUT"

_PREAMBLE = """\
import os as _cs_os
_cs_os.environ.setdefault("MPLBACKEND", "Agg")
try:
    import matplotlib as _cs_mpl
    _cs_mpl.use("Agg", force=True)
except Exception:
    pass
"""

_TRACER_HOOK = """\
try:
    import chartsmith_tracer as _cs_tracer
    _cs_tracer.install_hooks()
except Exception:
    pass
"""

_POSTAMBLE = """

try:
    import os as _cs_os2
    if not _cs_os2.path.exists("chart.png"):
        import matplotlib.pyplot as _cs_plt
        if _cs_plt.get_fignums():
            _cs_plt.gcf().savefig("chart.png")
        else:
            _cs_pngs = [
                _cs_f
                for _cs_f in _cs_os2.listdir(".")
                if _cs_f.lower().endswith(".png")
            ]
            if _cs_pngs:
                _cs_pngs.sort(key=lambda _cs_f: _cs_os2.path.getmtime(_cs_f))
                import shutil as _cs_shutil
                _cs_shutil.copyfile(_cs_pngs[-1], "chart.png")
except Exception:
    pass
"""


@dataclass(frozen=True)
class RenderLimits:
    """Resource caps for one render subprocess."""

    timeout: float = 60.0
    max_output_bytes: int = 64 * 1024

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


@dataclass(frozen=True)
class RenderOutcome:
    """Classified result of executing one chart program."""

    status: str  # success | runtime_error | timeout | no_image
    image: bytes | None
    stdout: str
    stderr: str
    duration: float

    def __post_init__(self):
        if self.status not in ("success", "runtime_error", "timeout", "no_image"):
            raise ValueError(f"unknown render status {self.status!r}")
        if (self.status == "success") != (self.image is not None):
            raise ValueError("image present iff status is success")


_HEX_RE = re.compile(r"#[0-9a-f]{6}$")


@dataclass(frozen=True)
class ElementTrace:
    """The four logged element facets of one executed chart program."""

    texts: tuple[str, ...] = ()
    chart_types: tuple[str, ...] = ()
    colors: tuple[str, ...] = ()
    layout: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "texts", tuple(self.texts))
        object.__setattr__(self, "chart_types", tuple(self.chart_types))
        object.__setattr__(self, "colors", tuple(self.colors))
        object.__setattr__(
            self, "layout", tuple(tuple(int(v) for v in t) for t in self.layout)
        )
        for color in self.colors:
            if not _HEX_RE.match(color):
                raise ValueError(f"color must be lowercase #rrggbb, got {color!r}")
        for rows, cols, index in self.layout:
            if rows < 1 or cols < 1 or not (1 <= index <= rows * cols):
                raise ValueError(f"bad layout triple {(rows, cols, index)}")


def parse_trace_sidecar(text: str) -> ElementTrace | None:
    """Parse sidecar JSON into a trace; any schema problem yields None."""
    try:
        data = json.loads(text)
        return ElementTrace(
            texts=tuple(str(t) for t in data["texts"]),
            chart_types=tuple(str(t) for t in data["chart_types"]),
            colors=tuple(str(c) for c in data["colors"]),
            layout=tuple(tuple(t) for t in data["layout"]),
        )
    except (ValueError, KeyError, TypeError) as exc:
        logger.warning("trace sidecar rejected: %s", exc)
        return None


def _drain(stream, cap: int, chunks: list[bytes]) -> None:
    # Reads the pipe to EOF so the child never blocks; keeps only `cap` bytes.
    kept = 0
    while True:
        block = stream.read(65536)
        if not block:
            return
        if kept < cap:
            take = block[: cap - kept]
            chunks.append(take)
            kept += len(take)


def _execute(
    script: str,
    limits: RenderLimits,
    command: str,
    extra_env: dict[str, str],
    workdir: Path,
) -> tuple[int | None, str, str, float, bool]:
    script_path = workdir / "chart_script.py"
    script_path.write_text(script, encoding="utf-8")

    env = dict(os.environ)
    env["MPLBACKEND"] = "Agg"
    env.update(extra_env)

    start = time.monotonic()
    proc = subprocess.Popen(
        [command, script_path.name],
        cwd=workdir,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        env=env,
        start_new_session=True,
    )
    out_chunks: list[bytes] = []
    err_chunks: list[bytes] = []
    readers = [
        threading.Thread(
            target=_drain, args=(proc.stdout, limits.max_output_bytes, out_chunks)
        ),
        threading.Thread(
            target=_drain, args=(proc.stderr, limits.max_output_bytes, err_chunks)
        ),
    ]
    for reader in readers:
        reader.daemon = True
        reader.start()

    timed_out = False
    try:
        proc.wait(timeout=limits.timeout)
    except subprocess.TimeoutExpired:
        timed_out = True
        try:
            os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            proc.kill()
        proc.wait()
    duration = time.monotonic() - start
    for reader in readers:
        reader.join(timeout=5)

    stdout = b"".join(out_chunks).decode("utf-8", errors="replace")
    stderr = b"".join(err_chunks).decode("utf-8", errors="replace")
    return proc.returncode, stdout, stderr, duration, timed_out


def _classify(
    returncode: int | None,
    stdout: str,
    stderr: str,
    duration: float,
    timed_out: bool,
    chart_path: Path,
) -> RenderOutcome:
    if timed_out:
        return RenderOutcome("timeout", None, stdout, stderr, duration)
    if returncode != 0:
        return RenderOutcome("runtime_error", None, stdout, stderr, duration)
    if chart_path.is_file():
        data = chart_path.read_bytes()
        try:
            Image.open(io.BytesIO(data)).verify()
        except Exception as exc:
            logger.warning("chart.png did not decode: %s", exc)
            return RenderOutcome("no_image", None, stdout, stderr, duration)
        return RenderOutcome("success", data, stdout, stderr, duration)
    return RenderOutcome("no_image", None, stdout, stderr, duration)


def render(
    program,
    limits: RenderLimits = RenderLimits(),
    command: str = "python3",
    keep_artifacts: bool = False,
) -> RenderOutcome:
    """Execute a program and capture its chart image."""
    outcome, _ = _render_impl(program, limits, command, keep_artifacts, traced=False)
    return outcome


def render_traced(
    program,
    limits: RenderLimits = RenderLimits(),
    command: str = "python3",
    keep_artifacts: bool = False,
) -> tuple[RenderOutcome, ElementTrace | None]:
    """Execute a program with element tracing enabled.

    The subprocess sees ``CHARTSMITH_TRACE_OUT`` pointing at a sidecar
    path; whatever valid trace JSON lands there is returned alongside the
    outcome. A missing or corrupt sidecar degrades to a None trace.
    """
    return _render_impl(program, limits, command, keep_artifacts, traced=True)


def _render_impl(
    program,
    limits: RenderLimits,
    command: str,
    keep_artifacts: bool,
    traced: bool,
) -> tuple[RenderOutcome, ElementTrace | None]:
    source = program.source if hasattr(program, "source") else str(program)
    if not source:
        raise ValueError("program source must be non-empty")

    workdir = Path(tempfile.mkdtemp(prefix="chartsmith-render-"))
    try:
        extra_env: dict[str, str] = {}
        preamble = _PREAMBLE
        trace_path = workdir / "trace.json"
        if traced:
            extra_env[TRACE_ENV] = str(trace_path)
            preamble = _PREAMBLE + _TRACER_HOOK
        script = preamble + source + _POSTAMBLE

        returncode, stdout, stderr, duration, timed_out = _execute(
            script, limits, command, extra_env, workdir
        )
        outcome = _classify(
            returncode, stdout, stderr, duration, timed_out, workdir / "chart.png"
        )

        trace = None
        if traced and outcome.status == "success":
            if trace_path.is_file():
                trace = parse_trace_sidecar(
                    trace_path.read_text(encoding="utf-8", errors="replace")
                )
            else:
                logger.info("no trace sidecar produced")
        return outcome, trace
    finally:
        if keep_artifacts:
            logger.info("render artifacts kept at %s", workdir)
        else:
            shutil.rmtree(workdir, ignore_errors=True)
