"""Font measurement models shared by the font-size solver and the typesetter.

Two implementations are provided: an analytic monospace model (cheap,
deterministic, handy for tests) and a model backed by a real TrueType font's
advance tables via Pillow. The solver and the typesetter must use the same
model for the geometric fit guarantees to hold.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from functools import lru_cache
from pathlib import Path

from PIL import ImageFont

from .core import LanguageClass, ZerodocError

logger = logging.getLogger(__name__)

# Width safety margins applied when estimating required line counts.
LATIN_BUFFER = 1.05
LOGOGRAPHIC_BUFFER = 1.01

_FONT_DIR = Path(__file__).parent / "data" / "fonts"
BUNDLED_MONO = "DejaVuSansMono.ttf"
BUNDLED_SANS = "DejaVuSans.ttf"


class FontError(ZerodocError):
    """A font could not be loaded or lacks required glyphs."""


def buffer_coefficient(language: LanguageClass) -> float:
    """Width buffer applied to simulated text width for a script family."""
    if language is LanguageClass.LATIN:
        return LATIN_BUFFER
    return LOGOGRAPHIC_BUFFER


def bundled_font_path(name: str = BUNDLED_MONO) -> Path:
    path = _FONT_DIR / name
    if not path.is_file():
        raise FontError(f"bundled font missing: {path}")
    return path


@lru_cache(maxsize=512)
def load_font(path: str, size: int) -> ImageFont.FreeTypeFont:
    """Load (and cache) a sized TrueType font."""
    try:
        return ImageFont.truetype(path, size)
    except OSError as exc:
        raise FontError(f"cannot load font {path}: {exc}") from exc


class FontMetricsModel(ABC):
    """Physical text measurement as a function of integer font size."""

    @abstractmethod
    def text_width(self, text: str, size: int) -> float:
        """Rendered width of ``text`` on a single line, in pixels."""

    @abstractmethod
    def line_height(self, size: int) -> float:
        """Vertical space one line occupies, in pixels."""


class MonospaceMetrics(FontMetricsModel):
    """Analytic model where every character advances the same distance.

    Width is ``len(text) * char_width_factor * size`` and line height is
    ``line_height_factor * size``.
    """

    def __init__(self, char_width_factor: float = 0.6, line_height_factor: float = 1.2):
        if char_width_factor <= 0 or line_height_factor <= 0:
            raise ValueError("metric factors must be positive")
        self.char_width_factor = char_width_factor
        self.line_height_factor = line_height_factor

    def text_width(self, text: str, size: int) -> float:
        return len(text) * self.char_width_factor * size

    def line_height(self, size: int) -> float:
        return self.line_height_factor * size


class TrueTypeMetrics(FontMetricsModel):
    """Measurement from a TrueType font via Pillow.

    Line height is the larger of ``line_height_factor * size`` and the
    font's ascent+descent; some fonts (including the bundled one) exceed a
    1.2x factor at small sizes, and using the raw factor there would let
    glyph ink spill out of the box the solver approved.
    """

    def __init__(self, font_path: str | Path | None = None, line_height_factor: float = 1.2):
        if font_path is None:
            font_path = bundled_font_path()
        self.font_path = str(font_path)
        self.line_height_factor = line_height_factor
        self.font_at(12)  # fail early on a bad path

    def font_at(self, size: int) -> ImageFont.FreeTypeFont:
        return load_font(self.font_path, size)

    def text_width(self, text: str, size: int) -> float:
        return float(self.font_at(size).getlength(text))

    def line_height(self, size: int) -> float:
        ascent, descent = self.font_at(size).getmetrics()
        return max(self.line_height_factor * size, float(ascent + descent))


def default_metrics(line_height_factor: float = 1.2) -> TrueTypeMetrics:
    """Metrics for the bundled monospace font."""
    return TrueTypeMetrics(bundled_font_path(), line_height_factor)


def _glyph_bitmap(font: ImageFont.FreeTypeFont, ch: str) -> tuple:
    mask = font.getmask(ch, mode="1")
    return mask.size, bytes(mask)


def missing_glyphs(font: ImageFont.FreeTypeFont, text: str) -> list[str]:
    """Characters of ``text`` the font cannot draw, in first-seen order.

    Pillow does not expose cmap coverage, so this compares each glyph's
    bitmap against the font's .notdef glyph (rendered via an unassigned
    codepoint). Whitespace is always considered drawable.
    """
    notdef = _glyph_bitmap(font, "͸")
    missing: list[str] = []
    seen: set[str] = set()
    for ch in text:
        if ch in seen or ch.isspace():
            continue
        seen.add(ch)
        if ch == "͸":
            missing.append(ch)
            continue
        if _glyph_bitmap(font, ch) == notdef:
            missing.append(ch)
    return missing
