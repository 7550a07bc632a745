"""Matplotlib instrumentation shim.

Injected into chart scripts ahead of user code. When the environment
variable ``CHARTSMITH_TRACE_OUT`` is set, ``install_hooks()`` wraps the
matplotlib drawing entry points to record four element facets:

* texts: titles, axis labels, tick labels, legend entries, annotations,
* chart_types: one canonical kind per drawing call,
* colors: resolved ``#rrggbb`` values of the drawn artists,
* layout: one (rows, cols, index) triple per axes.

The record is flushed atomically to the sidecar path on every figure save
and again at interpreter exit; the last write wins. Recording failures
degrade to a partial trace (version suffix ``-partial``) and never abort
or alter the user script: every wrapper returns the wrapped call's result
untouched, so rendered pixels are identical with and without the shim.

Without the environment variable the module is inert.
"""

from __future__ import annotations

import atexit
import json
import os
import sys
import tempfile

__version__ = "0.1.0"

TRACE_ENV = "CHARTSMITH_TRACE_OUT"
SHIM_VERSION = f"chartsmith-tracer/{__version__}"

# Drawing methods worth logging, mapped to the canonical type vocabulary
# shared with the evaluation harness (chartsmith assets/chart_types.json).
_FALLBACK_METHOD_KINDS = {
    "plot": "line",
    "bar": "bar",
    "barh": "barh",
    "scatter": "scatter",
    "pie": "pie",
    "hist": "hist",
    "hist2d": "hist",
    "boxplot": "box",
    "violinplot": "violin",
    "imshow": "heatmap",
    "pcolormesh": "heatmap",
    "pcolor": "heatmap",
    "matshow": "heatmap",
    "fill_between": "area",
    "fill_betweenx": "area",
    "stackplot": "area",
    "contour": "contour",
    "contourf": "contour",
    "quiver": "quiver",
    "fill": "fill",
    "step": "step",
    "stem": "stem",
    "errorbar": "errorbar",
}


def method_kinds() -> dict[str, str]:
    """Method-to-kind map derived from the shared vocabulary file when the
    harness package is importable, with a built-in mirror otherwise."""
    try:
        from importlib import resources

        raw = (
            resources.files("chartsmith") / "assets" / "chart_types.json"
        ).read_text(encoding="utf-8")
        data = json.loads(raw)
        canonical = set(data["canonical"])
        aliases = dict(data["aliases"])
        kinds = {}
        for method in _FALLBACK_METHOD_KINDS:
            kind = aliases.get(method, method)
            kinds[method] = kind if kind in canonical else "other"
        return kinds
    except Exception:
        return dict(_FALLBACK_METHOD_KINDS)


class _State:
    def __init__(self):
        self.chart_types: list[str] = []
        self.colors: list[str] = []
        # id(figure) -> (texts, layout); replaced wholesale on re-harvest
        self.harvests: dict[int, tuple[list[str], list[tuple[int, int, int]]]] = {}
        self.harvest_order: list[int] = []
        self.partial = False

    def note_failure(self) -> None:
        self.partial = True

    def record_harvest(self, fig_id: int, texts, layout) -> None:
        if fig_id not in self.harvests:
            self.harvest_order.append(fig_id)
        self.harvests[fig_id] = (texts, layout)

    def as_record(self) -> dict:
        texts: list[str] = []
        layout: list[list[int]] = []
        for fig_id in self.harvest_order:
            fig_texts, fig_layout = self.harvests[fig_id]
            texts.extend(fig_texts)
            layout.extend([list(t) for t in fig_layout])
        version = SHIM_VERSION + ("-partial" if self.partial else "")
        return {
            "texts": texts,
            "chart_types": list(self.chart_types),
            "colors": list(self.colors),
            "layout": layout,
            "shim_version": version,
        }


_state = _State()
_installed = False
# depth guard: composite draw methods (hist calls bar, step calls plot)
# must log only the outermost public call
_in_draw_call = [False]


def _to_hex(value) -> str | None:
    try:
        from matplotlib.colors import to_hex

        return to_hex(value, keep_alpha=False).lower()
    except Exception:
        return None


def _add_colors(values) -> None:
    # one entry per distinct color of one drawing call; extractors dedupe
    for value in values:
        hex_color = _to_hex(value)
        if hex_color:
            _state.colors.append(hex_color)


def _first_facecolors(collection) -> list:
    try:
        import numpy as np

        rows = np.atleast_2d(collection.get_facecolor())
        seen: list[tuple] = []
        for row in rows:
            key = tuple(round(float(v), 6) for v in row)
            if key not in seen:
                seen.append(key)
        return [tuple(k) for k in seen]
    except Exception:
        return []


def _colors_from(method: str, result, args, kwargs) -> list:
    if method in ("plot", "step"):
        return [line.get_color() for line in result]
    if method in ("bar", "barh", "hist"):
        container = result[2] if method == "hist" else result
        seen = []
        for patch in container.patches:
            color = patch.get_facecolor()
            if color not in seen:
                seen.append(color)
        return seen
    if method == "scatter":
        return _first_facecolors(result)
    if method == "pie":
        return [wedge.get_facecolor() for wedge in result[0]]
    if method in ("fill_between", "fill_betweenx"):
        return _first_facecolors(result)
    if method in ("fill", "stackplot"):
        return [poly.get_facecolor() for poly in result]
    if method == "errorbar":
        return [result.lines[0].get_color()]
    if method == "stem":
        return [result.markerline.get_color()]
    if method == "violinplot":
        return [
            body.get_facecolor()[0]
            for body in result.get("bodies", [])
            if len(body.get_facecolor())
        ]
    # heatmaps, contours, quivers, boxplots: no single representative color
    if "color" in kwargs:
        return [kwargs["color"]]
    return []


def _wrap_method(cls, method: str, kind: str) -> None:
    original = getattr(cls, method, None)
    if original is None:
        return

    def wrapper(self, *args, __original=original, __method=method, __kind=kind, **kwargs):
        outermost = not _in_draw_call[0]
        if outermost:
            _in_draw_call[0] = True
        try:
            result = __original(self, *args, **kwargs)
        finally:
            if outermost:
                _in_draw_call[0] = False
        if outermost:
            try:
                _state.chart_types.append(__kind)
                _add_colors(_colors_from(__method, result, args, kwargs))
            except Exception:
                _state.note_failure()
        return result

    wrapper.__name__ = method
    wrapper.__wrapped__ = original
    setattr(cls, method, wrapper)


def _harvest_figure(fig) -> None:
    texts: list[str] = []
    layout: list[tuple[int, int, int]] = []

    suptitle = getattr(fig, "_suptitle", None)
    if suptitle is not None:
        texts.append(suptitle.get_text())

    for ax in fig.axes:
        texts.append(ax.get_title())
        texts.append(ax.get_xlabel())
        texts.append(ax.get_ylabel())
        for tick in list(ax.get_xticklabels()) + list(ax.get_yticklabels()):
            texts.append(tick.get_text())
        for artist in ax.texts:
            texts.append(artist.get_text())
        legend = ax.get_legend()
        if legend is not None:
            texts.extend(t.get_text() for t in legend.get_texts())

        spec = None
        if hasattr(ax, "get_subplotspec"):
            try:
                spec = ax.get_subplotspec()
            except Exception:
                spec = None
        if spec is not None:
            gridspec = spec.get_gridspec()
            rows, cols = gridspec.get_geometry()
            layout.append((int(rows), int(cols), int(spec.num1) + 1))
        else:
            layout.append((1, 1, 1))

    cleaned = [t.strip() for t in texts if t and t.strip()]
    _state.record_harvest(id(fig), cleaned, layout)


def flush(path: str | None = None) -> None:
    """Atomically write the current trace record to the sidecar path.

    Uses the ``CHARTSMITH_TRACE_OUT`` environment variable when no path is
    given; does nothing when neither is set. Write failures print to
    stderr and leave the process exit code untouched.
    """
    target = path or os.environ.get(TRACE_ENV)
    if not target:
        return
    try:
        directory = os.path.dirname(os.path.abspath(target)) or "."
        fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(_state.as_record(), fh)
            os.replace(tmp_path, target)
        finally:
            if os.path.exists(tmp_path):
                os.unlink(tmp_path)
    except Exception as exc:
        print(f"chartsmith-tracer: could not write sidecar: {exc}", file=sys.stderr)


def _wrap_savefig(figure_cls) -> None:
    original = figure_cls.savefig

    def savefig(self, *args, __original=original, **kwargs):
        result = __original(self, *args, **kwargs)
        try:
            _harvest_figure(self)
        except Exception:
            _state.note_failure()
        flush()
        return result

    savefig.__name__ = "savefig"
    savefig.__wrapped__ = original
    figure_cls.savefig = savefig


def _exit_flush() -> None:
    try:
        from matplotlib import _pylab_helpers

        for manager in _pylab_helpers.Gcf.get_all_fig_managers():
            fig = manager.canvas.figure
            try:
                fig.canvas.draw()
                _harvest_figure(fig)
            except Exception:
                _state.note_failure()
    except Exception:
        _state.note_failure()
    flush()


def install_hooks() -> None:
    """Wrap the plotting entry points. Inert when the sidecar environment
    variable is unset; safe to call more than once."""
    global _installed
    if not os.environ.get(TRACE_ENV) or _installed:
        return
    try:
        from matplotlib.axes import Axes
        from matplotlib.figure import Figure
    except Exception:
        print("chartsmith-tracer: matplotlib unavailable, tracing disabled", file=sys.stderr)
        return

    _installed = True
    for method, kind in method_kinds().items():
        try:
            _wrap_method(Axes, method, kind)
        except Exception:
            _state.note_failure()
    try:
        _wrap_savefig(Figure)
    except Exception:
        _state.note_failure()
    atexit.register(_exit_flush)


def reset_for_tests() -> None:
    """Clear recorded state (test helper; hooks stay installed)."""
    global _state
    _state = _State()
