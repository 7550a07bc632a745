"""Heuristic similarity verifier for chart images and the stop rule.

Three scores in [0, 1] compare a generated chart against the reference:

* color: cosine similarity of 11-bin HSV pixel-count histograms,
* text: Jaccard index over token sets extracted by a pluggable OCR backend,
* structure: mean SSIM of the grayscale images after a 256x256 resize.

A threshold schedule turns the three scores into a pass decision, either
by their average (default) or by requiring every score to clear the bar.
"""

from __future__ import annotations

import hashlib
import io
import logging
import math
import string
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .errors import DimensionMismatch, OcrBackendError
from .renderer import RenderOutcome

logger = logging.getLogger(__name__)

HSV_BIN_NAMES = (
    "red",
    "orange",
    "yellow",
    "green",
    "cyan",
    "blue",
    "purple",
    "magenta",
    "white",
    "gray",
    "black",
)

# Achromatic cutoffs and hue band edges (degrees). Every pixel maps to
# exactly one bin, so the histogram is a partition of the image.
_BLACK_V = 0.15
_WHITE_V = 0.85
_ACHROMATIC_S = 0.15
_HUE_BANDS = (
    ("orange", 15.0, 45.0),
    ("yellow", 45.0, 70.0),
    ("green", 70.0, 170.0),
    ("cyan", 170.0, 200.0),
    ("blue", 200.0, 260.0),
    ("purple", 260.0, 300.0),
    ("magenta", 300.0, 345.0),
)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_RESIZE = 256
_SSIM_C1 = (0.01 * 255.0) ** 2
_SSIM_C2 = (0.03 * 255.0) ** 2


@dataclass(frozen=True)
class VerifierScores:
    """Color, text, and structure similarity, each in [0, 1]."""

    color: float
    text: float
    structure: float

    def __post_init__(self):
        for name in ("color", "text", "structure"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} score {value} outside [0, 1]")

    @property
    def mean(self) -> float:
        return (self.color + self.text + self.structure) / 3.0

    @property
    def minimum(self) -> float:
        return min(self.color, self.text, self.structure)


@dataclass(frozen=True)
class ThresholdSchedule:
    """Stop-rule threshold, optionally relaxed a little every round."""

    mode: str = "average"
    base_threshold: float = 0.9
    decay_per_round: float = 0.0

    def __post_init__(self):
        if self.mode not in ("average", "all_pass"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if not 0.0 <= self.base_threshold <= 1.0:
            raise ValueError("base threshold must be in [0, 1]")
        if self.decay_per_round < 0:
            raise ValueError("decay must be non-negative")

    def threshold_at(self, round: int) -> float:
        return max(0.0, self.base_threshold - round * self.decay_per_round)


@dataclass(frozen=True)
class PassDecision:
    passed: bool
    scores: VerifierScores
    threshold_used: float
    round: int


@dataclass(frozen=True)
class ColorHistogram:
    """Pixel counts over the 11 HSV bins; sums to the image pixel count."""

    counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.counts) != len(HSV_BIN_NAMES):
            raise ValueError("histogram must have exactly 11 bins")
        if any(c < 0 for c in self.counts):
            raise ValueError("bin counts must be non-negative")
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    @property
    def total(self) -> int:
        return sum(self.counts)

    def as_dict(self) -> dict[str, int]:
        return dict(zip(HSV_BIN_NAMES, self.counts))


# ---------------------------------------------------------------------------
# image decoding helpers


def decode_rgb(data: bytes) -> np.ndarray:
    """Decode image bytes to an RGB uint8 array of shape (H, W, 3)."""
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def pixel_digest(data: bytes) -> str:
    """Digest of the decoded pixels; stable across PNG re-encodings."""
    arr = decode_rgb(data)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def to_grayscale(data: bytes) -> np.ndarray:
    """BT.601 luma as float64 in [0, 255]."""
    rgb = decode_rgb(data).astype(np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def _resize_gray(gray: np.ndarray, size: int = SSIM_RESIZE) -> np.ndarray:
    img = Image.fromarray(gray.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float64)


# ---------------------------------------------------------------------------
# text score (m2)


class TextExtractor(Protocol):
    """Pluggable OCR: image bytes (plus an optional source path) to lines."""

    def extract(self, image: bytes, source: Path | None = None) -> list[str]: ...


class CommandOcr:
    """Adapter for an external OCR executable.

    The command is invoked as ``argv = [command, image_path]`` and must
    print one recognized line per stdout line. A nonzero exit raises
    OcrBackendError.
    """

    def __init__(self, command: str, timeout: float = 60.0):
        self.command = command
        self.timeout = timeout

    def extract(self, image: bytes, source: Path | None = None) -> list[str]:
        path = source
        tmp = None
        try:
            if path is None:
                tmp = tempfile.NamedTemporaryFile(suffix=".png", delete=False)
                tmp.write(image)
                tmp.close()
                path = Path(tmp.name)
            try:
                proc = subprocess.run(
                    [self.command, str(path)],
                    capture_output=True,
                    text=True,
                    timeout=self.timeout,
                )
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise OcrBackendError(f"ocr command failed to run: {exc}") from exc
            if proc.returncode != 0:
                raise OcrBackendError(
                    f"ocr command exited {proc.returncode}: {proc.stderr[:300]}"
                )
            return [line for line in proc.stdout.splitlines() if line.strip()]
        finally:
            if tmp is not None:
                Path(tmp.name).unlink(missing_ok=True)


class FixtureOcr:
    """Deterministic extractor for hermetic tests.

    Text for an image comes from a sidecar ``.txt`` next to its source
    path when one exists, otherwise from a registry keyed by the decoded
    pixel digest, built by scanning fixture directories for ``.png`` files
    with sidecars. Unknown images yield no text.
    """

    def __init__(self, roots: Sequence[Path | str] = ()):
        self._registry: dict[str, tuple[str, ...]] = {}
        for root in roots:
            self.add_root(Path(root))

    def add_root(self, root: Path) -> None:
        for png in sorted(Path(root).rglob("*.png")):
            sidecar = png.with_suffix(".txt")
            if sidecar.is_file():
                lines = self._read_lines(sidecar)
                self._registry[pixel_digest(png.read_bytes())] = lines

    @staticmethod
    def _read_lines(sidecar: Path) -> tuple[str, ...]:
        raw = sidecar.read_text(encoding="utf-8")
        return tuple(line for line in raw.splitlines() if line.strip())

    def extract(self, image: bytes, source: Path | None = None) -> list[str]:
        if source is not None:
            sidecar = Path(source).with_suffix(".txt")
            if sidecar.is_file():
                return list(self._read_lines(sidecar))
        return list(self._registry.get(pixel_digest(image), ()))


def tokenize(lines: Sequence[str]) -> set[str]:
    """Lowercased whitespace tokens with edge punctuation trimmed."""
    tokens = set()
    for line in lines:
        for raw in line.split():
            token = raw.strip(string.punctuation).lower()
            if token:
                tokens.add(token)
    return tokens


def jaccard(a: set[str], b: set[str]) -> float:
    """Set Jaccard index; two empty sets count as full agreement."""
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def text_score(
    gen: bytes,
    ref: bytes,
    ocr: TextExtractor,
    gen_source: Path | None = None,
    ref_source: Path | None = None,
) -> float:
    """Jaccard index of the token sets extracted from the two images."""
    gen_tokens = tokenize(ocr.extract(gen, source=gen_source))
    ref_tokens = tokenize(ocr.extract(ref, source=ref_source))
    return jaccard(gen_tokens, ref_tokens)


# ---------------------------------------------------------------------------
# color score (m1)


def _rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized RGB [0,1] to (hue degrees [0,360), saturation, value)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc

    hue = np.zeros_like(maxc)
    mask = delta > 0
    rc = np.where(mask, (maxc - r) / np.where(mask, delta, 1.0), 0.0)
    gc = np.where(mask, (maxc - g) / np.where(mask, delta, 1.0), 0.0)
    bc = np.where(mask, (maxc - b) / np.where(mask, delta, 1.0), 0.0)
    hue = np.where((maxc == r) & mask, bc - gc, hue)
    hue = np.where((maxc == g) & mask, 2.0 + rc - bc, hue)
    hue = np.where((maxc == b) & mask, 4.0 + gc - rc, hue)
    hue = (hue * 60.0) % 360.0

    sat = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return hue, sat, maxc


def hsv_histogram(image: bytes) -> ColorHistogram:
    """Classify every pixel into exactly one of the 11 color bins."""
    rgb = decode_rgb(image).astype(np.float64) / 255.0
    hue, sat, val = (x.ravel() for x in _rgb_to_hsv(rgb))

    bin_idx = np.empty(hue.shape, dtype=np.int8)
    bin_idx.fill(-1)

    black = val < _BLACK_V
    achromatic = (sat < _ACHROMATIC_S) & ~black
    white = achromatic & (val >= _WHITE_V)
    gray = achromatic & ~white
    bin_idx[black] = HSV_BIN_NAMES.index("black")
    bin_idx[white] = HSV_BIN_NAMES.index("white")
    bin_idx[gray] = HSV_BIN_NAMES.index("gray")

    chroma = bin_idx < 0
    red = chroma & ((hue >= 345.0) | (hue < 15.0))
    bin_idx[red] = HSV_BIN_NAMES.index("red")
    for name, lo, hi in _HUE_BANDS:
        band = chroma & (hue >= lo) & (hue < hi)
        bin_idx[band] = HSV_BIN_NAMES.index(name)

    counts = np.bincount(bin_idx, minlength=len(HSV_BIN_NAMES))
    return ColorHistogram(counts=tuple(int(c) for c in counts))


def color_score(gen: bytes, ref: bytes) -> float:
    """Cosine similarity of the two bin-count vectors, clamped to [0, 1]."""
    a = np.asarray(hsv_histogram(gen).counts, dtype=np.float64)
    b = np.asarray(hsv_histogram(ref).counts, dtype=np.float64)
    # Counts are integers, so the dot products are exact; a single square
    # root keeps the identical-histogram case at exactly 1.0.
    denom_sq = float(np.dot(a, a)) * float(np.dot(b, b))
    if denom_sq == 0:
        return 1.0 if not a.any() and not b.any() else 0.0
    return float(min(1.0, max(0.0, float(np.dot(a, b)) / math.sqrt(denom_sq))))


# ---------------------------------------------------------------------------
# structure score (m3)


def gaussian_kernel1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    kernel = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def _gauss_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Separable valid-mode correlation: rows then columns.
    rows = sliding_window_view(img, kernel.size, axis=1) @ kernel
    return np.ascontiguousarray(
        sliding_window_view(rows, kernel.size, axis=0) @ kernel
    )


def raw_ssim(gray_a: np.ndarray, gray_b: np.ndarray) -> float:
    """Unclamped mean SSIM over Gaussian-weighted 11x11 windows.

    Inputs are grayscale matrices on the [0, 255] scale with identical
    shapes of at least 11x11.
    """
    a = np.asarray(gray_a, dtype=np.float64)
    b = np.asarray(gray_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise DimensionMismatch(f"need a 2-D matrix of at least 11x11, got {a.shape}")

    kernel = gaussian_kernel1d()
    mu_a = _gauss_valid(a, kernel)
    mu_b = _gauss_valid(b, kernel)
    var_a = _gauss_valid(a * a, kernel) - mu_a * mu_a
    var_b = _gauss_valid(b * b, kernel) - mu_b * mu_b
    cov = _gauss_valid(a * b, kernel) - mu_a * mu_b

    numerator = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    denominator = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(numerator / denominator))


def structure_score(gen: bytes, ref: bytes) -> float:
    """Clamped mean SSIM of the resized grayscale images."""
    a = _resize_gray(to_grayscale(gen))
    b = _resize_gray(to_grayscale(ref))
    return float(min(1.0, max(0.0, raw_ssim(a, b))))


# ---------------------------------------------------------------------------
# stop rule


def verify(scores: VerifierScores, schedule: ThresholdSchedule, round: int) -> PassDecision:
    """Apply the schedule's rule at the round's effective threshold."""
    if round < 0:
        raise ValueError("round must be non-negative")
    threshold = schedule.threshold_at(round)
    if schedule.mode == "all_pass":
        passed = scores.minimum >= threshold
    else:
        passed = scores.mean >= threshold
    return PassDecision(passed=passed, scores=scores, threshold_used=threshold, round=round)


def score_pair(
    gen: RenderOutcome,
    ref: bytes,
    ocr: TextExtractor,
    schedule: ThresholdSchedule,
    round: int,
    ref_source: Path | None = None,
) -> PassDecision:
    """Score a render against the reference and decide the stop verdict.

    Failed renders score (0, 0, 0) and never pass. An OCR failure only
    degrades the text score to 0 with a logged warning.
    """
    if gen.status != "success" or gen.image is None:
        return verify(VerifierScores(0.0, 0.0, 0.0), schedule, round)

    color = color_score(gen.image, ref)
    structure = structure_score(gen.image, ref)
    try:
        text = text_score(gen.image, ref, ocr, ref_source=ref_source)
    except OcrBackendError as exc:
        logger.warning("ocr backend failed, text score degraded to 0: %s", exc)
        text = 0.0
    return verify(VerifierScores(color, text, structure), schedule, round)
