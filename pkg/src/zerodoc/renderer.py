"""Page composition: background preparation, typesetting, and padding.

A rendered page starts from either a blank page or the source image with
all annotated regions inpainted away, gets replacement text typeset into
every block at the solved font size, and is finally padded (and if needed
scaled) onto a fixed square canvas. Token accounting for the page rides
along in a metadata sidecar.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .core import (
    BBox,
    Corpus,
    LanguageClass,
    PageAnnotation,
    TextBlock,
    ZerodocError,
    detect_language,
    save_corpus,
    text_capacity,
)
from .fonts import (
    FontMetricsModel,
    TrueTypeMetrics,
    bundled_font_path,
    load_font,
    missing_glyphs,
)
from .layout import required_line_count

logger = logging.getLogger(__name__)

RENDER_META_NAME = "render_meta.jsonl"

DEFAULT_CANVAS = 1280


class RenderError(ZerodocError):
    """Rendering failed (bad geometry, missing glyphs, capacity mismatch)."""


class ResolutionMode(str, Enum):
    """Named encoder budgets; each maps to an assumed visual token count."""

    TINY = "tiny"
    SMALL = "small"
    BASE = "base"
    LARGE = "large"


class Background(str, Enum):
    BLANK = "blank"
    INPAINTED_SOURCE = "inpainted_source"


# Assumed visual tokens spent per page at each mode. These are working
# assumptions for computing compression ratios, not measurements of any
# particular encoder; override per run when the deployed encoder differs.
DEFAULT_VISUAL_TOKENS: dict[ResolutionMode, int] = {
    ResolutionMode.TINY: 64,
    ResolutionMode.SMALL: 100,
    ResolutionMode.BASE: 256,
    ResolutionMode.LARGE: 400,
}


@dataclass(frozen=True)
class RenderTheta:
    """Rendering parameter set shared by every page of a run."""

    canvas_w: int = DEFAULT_CANVAS
    canvas_h: int = DEFAULT_CANVAS
    resolution_mode: ResolutionMode = ResolutionMode.BASE
    visual_tokens_per_mode: Mapping[ResolutionMode, int] = field(
        default_factory=lambda: dict(DEFAULT_VISUAL_TOKENS)
    )
    font_face: str | None = None
    line_height_factor: float = 1.2
    background: Background = Background.BLANK

    def __post_init__(self) -> None:
        if self.canvas_w <= 0 or self.canvas_h <= 0:
            raise RenderError(
                f"canvas must be positive, got {self.canvas_w}x{self.canvas_h}"
            )
        if self.resolution_mode not in self.visual_tokens_per_mode:
            raise RenderError(f"no visual token count for mode {self.resolution_mode}")
        for mode, tokens in self.visual_tokens_per_mode.items():
            if tokens <= 0:
                raise RenderError(f"visual tokens for {mode} must be positive")

    @property
    def visual_tokens(self) -> int:
        return self.visual_tokens_per_mode[self.resolution_mode]

    def font_path(self) -> str:
        if self.font_face is not None:
            return self.font_face
        return str(bundled_font_path())

    def metrics(self) -> TrueTypeMetrics:
        return TrueTypeMetrics(self.font_path(), self.line_height_factor)

    def theta_hash(self) -> str:
        payload = {
            "canvas_w": self.canvas_w,
            "canvas_h": self.canvas_h,
            "resolution_mode": self.resolution_mode.value,
            "visual_tokens": {
                mode.value: self.visual_tokens_per_mode[mode]
                for mode in sorted(self.visual_tokens_per_mode, key=lambda m: m.value)
            },
            "font_face": Path(self.font_path()).name,
            "line_height_factor": self.line_height_factor,
            "background": self.background.value,
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


def _as_3d(image: np.ndarray) -> tuple[np.ndarray, bool]:
    if image.ndim == 2:
        return image[:, :, None], True
    if image.ndim == 3:
        return image, False
    raise RenderError(f"expected 2D or 3D image array, got shape {image.shape}")


def inpaint_regions(image: np.ndarray, regions: Sequence[BBox]) -> np.ndarray:
    """Erase regions by interpolating across them from their boundaries.

    Each region is filled row by row, linearly blending the pixel just left
    of the region into the pixel just right of it. Regions touching both
    horizontal edges interpolate down columns instead; regions touching one
    horizontal edge extend the opposite boundary. Regions are processed in
    order, so later fills may sample earlier ones.
    """
    arr, was_2d = _as_3d(np.asarray(image))
    height, width = arr.shape[:2]
    out = arr.astype(np.float64).copy()
    for region in regions:
        x0, y0 = region.x, region.y
        x1, y1 = min(region.right, width), min(region.bottom, height)
        if x0 >= width or y0 >= height:
            logger.warning("inpaint region %s lies outside %dx%d image; skipped",
                           region.as_list(), width, height)
            continue
        rw, rh = x1 - x0, y1 - y0
        left = out[y0:y1, x0 - 1, :] if x0 > 0 else None
        right = out[y0:y1, x1, :] if x1 < width else None
        if left is not None and right is not None:
            t = (np.arange(1, rw + 1) / (rw + 1))[None, :, None]
            fill = left[:, None, :] * (1.0 - t) + right[:, None, :] * t
        else:
            top = out[y0 - 1, x0:x1, :] if y0 > 0 else None
            bottom = out[y1, x0:x1, :] if y1 < height else None
            if top is not None and bottom is not None:
                t = (np.arange(1, rh + 1) / (rh + 1))[:, None, None]
                fill = top[None, :, :] * (1.0 - t) + bottom[None, :, :] * t
            elif top is not None or bottom is not None:
                edge = top if top is not None else bottom
                fill = np.broadcast_to(edge[None, :, :], (rh, rw, arr.shape[2]))
            elif left is not None or right is not None:
                edge = left if left is not None else right
                fill = np.broadcast_to(edge[:, None, :], (rh, rw, arr.shape[2]))
            else:
                raise RenderError("inpaint region covers the entire image; "
                                  "no boundary to interpolate from")
        out[y0:y1, x0:x1, :] = fill
    result = np.rint(out).astype(np.uint8)
    return result[:, :, 0] if was_2d else result


def wrap_to_lines(
    text: str,
    bbox: BBox,
    metrics: FontMetricsModel,
    language: LanguageClass,
    size: int,
) -> list[str]:
    """Break text into at most the solver's assumed line count.

    Units are words for Latin and characters otherwise. Lines fill greedily
    against the box width; if the unit stream would need more lines than the
    solver allotted, the remainder is crammed into the last line so the
    vertical fit is never exceeded.
    """
    max_lines = required_line_count(text, bbox, metrics, language, size)
    if language is LanguageClass.LATIN:
        units = text.split()
        sep = " "
    else:
        units = [ch for ch in text if not ch.isspace()]
        sep = ""
    if not units:
        return []
    lines: list[str] = []
    current = units[0]
    for unit in units[1:]:
        candidate = current + sep + unit
        # the last allotted line absorbs any overflow so the vertical fit
        # approved by the solver is never exceeded
        if metrics.text_width(candidate, size) <= bbox.w or len(lines) == max_lines - 1:
            current = candidate
        else:
            lines.append(current)
            current = unit
    lines.append(current)
    return lines


def typeset_block(
    canvas: np.ndarray,
    block: TextBlock,
    text: str,
    theta: RenderTheta,
    metrics: FontMetricsModel | None = None,
) -> np.ndarray:
    """Draw replacement text into one block region of a page image.

    The block must carry a solved font size. When the block has a capacity,
    the replacement text must match it exactly under the block's script
    class. Returns a new array; the input is not modified.
    """
    out = np.asarray(canvas).copy()
    if not text:
        return out
    if block.font_size is None:
        raise RenderError(f"block at {block.bbox.as_list()} has no solved font size")
    language = block.language or detect_language(text)
    if block.capacity is not None:
        have = text_capacity(text, language)
        if have != block.capacity:
            raise RenderError(
                f"replacement text carries {have} {language.value} units, "
                f"block capacity is {block.capacity}"
            )
    if metrics is None:
        metrics = theta.metrics()
    size = block.font_size
    font = load_font(theta.font_path(), size)
    missing = missing_glyphs(font, text)
    if missing:
        raise RenderError(
            "font {} lacks glyphs for: {}".format(
                Path(theta.font_path()).name,
                " ".join(f"U+{ord(c):04X} {c!r}" for c in missing),
            )
        )
    lines = wrap_to_lines(text, block.bbox, metrics, language, size)
    line_height = metrics.line_height(size)
    pil = Image.fromarray(out)
    draw = ImageDraw.Draw(pil)
    for i, line in enumerate(lines):
        y = block.bbox.y + i * line_height
        draw.text((block.bbox.x, y), line, fill=0 if out.ndim == 2 else (0, 0, 0),
                  font=font)
    return np.asarray(pil)


def pad_to_canvas(image: np.ndarray, canvas_w: int = DEFAULT_CANVAS,
                  canvas_h: int = DEFAULT_CANVAS) -> np.ndarray:
    """Place a page onto a white canvas, top-left aligned.

    Pages larger than the canvas are scaled down preserving aspect ratio;
    smaller pages are padded without scaling.
    """
    arr = np.asarray(image)
    height, width = arr.shape[:2]
    if height == canvas_h and width == canvas_w:
        return arr.copy()
    if width > canvas_w or height > canvas_h:
        scale = min(canvas_w / width, canvas_h / height)
        new_w = max(1, min(canvas_w, round(width * scale)))
        new_h = max(1, min(canvas_h, round(height * scale)))
        resized = Image.fromarray(arr).resize((new_w, new_h), Image.LANCZOS)
        arr = np.asarray(resized)
        height, width = arr.shape[:2]
    canvas = np.full((canvas_h, canvas_w) + arr.shape[2:], 255, dtype=np.uint8)
    canvas[:height, :width] = arr
    return canvas


@dataclass(frozen=True, eq=False)
class RenderedPage:
    """One composed page image plus its token accounting."""

    image: np.ndarray
    theta: RenderTheta
    page_id: str
    text_tokens: int
    visual_tokens: int
    seed: int | None = None

    def __post_init__(self) -> None:
        height, width = self.image.shape[:2]
        if (width, height) != (self.theta.canvas_w, self.theta.canvas_h):
            raise RenderError(
                f"rendered page is {width}x{height}, theta wants "
                f"{self.theta.canvas_w}x{self.theta.canvas_h}"
            )


def render_page(
    page: PageAnnotation,
    replacement_texts: Sequence[str],
    theta: RenderTheta,
    *,
    metrics: FontMetricsModel | None = None,
    source_image: np.ndarray | None = None,
    seed: int | None = None,
    text_tokens: int | None = None,
) -> RenderedPage:
    """Compose one page: background, typeset every block, pad to canvas.

    Args:
        page: Annotated page whose blocks carry solved font sizes and
            capacities.
        replacement_texts: One replacement text per block, in block order.
        theta: Rendering parameters.
        metrics: Measurement model for wrapping; defaults to the theta font.
        source_image: Required when theta asks for an inpainted background.
        seed: Generation seed recorded for provenance.
        text_tokens: Override for the page's text token count, for callers
            that count with a tokenizer instead of block capacities.
    """
    if len(replacement_texts) != len(page.blocks):
        raise RenderError(
            f"page {page.page_id}: {len(replacement_texts)} replacement texts "
            f"for {len(page.blocks)} blocks"
        )
    if theta.background is Background.INPAINTED_SOURCE:
        if source_image is None:
            raise RenderError("inpainted background requested without a source image")
        base = inpaint_regions(source_image, [b.bbox for b in page.blocks])
    else:
        base = np.full((page.page_h, page.page_w, 3), 255, dtype=np.uint8)
    if metrics is None:
        metrics = theta.metrics()
    for block, text in zip(page.blocks, replacement_texts):
        base = typeset_block(base, block, text, theta, metrics)
    image = pad_to_canvas(base, theta.canvas_w, theta.canvas_h)
    return RenderedPage(
        image=image,
        theta=theta,
        page_id=page.page_id,
        text_tokens=page.text_tokens if text_tokens is None else text_tokens,
        visual_tokens=theta.visual_tokens,
        seed=seed,
    )


def token_ratio(text_tokens: int, visual_tokens: int) -> float:
    """Text tokens carried per visual token spent."""
    if text_tokens < 0:
        raise ValueError(f"text_tokens must be >= 0, got {text_tokens}")
    if visual_tokens <= 0:
        raise ValueError(f"visual_tokens must be positive, got {visual_tokens}")
    return text_tokens / visual_tokens


def compression_ratio(text_tokens: int, pages: Sequence[RenderedPage]) -> float:
    """Compression ratio of a text carried across a set of rendered pages.

    The denominator is the total visual token budget of all pages.
    """
    if not pages:
        raise RenderError("compression ratio needs at least one rendered page")
    return token_ratio(text_tokens, sum(p.visual_tokens for p in pages))


def load_token_counter(vocab_path: str | Path):
    """Build a subword token counter from a one-token-per-line vocabulary.

    Counting walks each whitespace-separated chunk with greedy longest-match
    against the vocabulary; characters not covered by any entry count as one
    token each. This is a plain substitute for model-specific tokenizers when
    token parity with a particular model matters more than capacity units.
    """
    entries: set[str] = set()
    with open(vocab_path, encoding="utf-8") as fh:
        for line in fh:
            token = line.rstrip("\n")
            if token:
                entries.add(token)
    if not entries:
        raise RenderError(f"token vocabulary {vocab_path} is empty")
    longest = max(len(token) for token in entries)

    def count(text: str) -> int:
        total = 0
        for chunk in text.split():
            i = 0
            while i < len(chunk):
                for span in range(min(longest, len(chunk) - i), 0, -1):
                    if chunk[i:i + span] in entries:
                        i += span
                        break
                else:
                    i += 1
                total += 1
        return total

    return count


@dataclass(frozen=True)
class PageReplacement:
    """Replacement texts for one page, with the seed that produced them."""

    texts: tuple[str, ...]
    seed: int | None = None


def load_replacements(path: str | Path) -> dict[str, PageReplacement]:
    """Read a replacements JSONL file: {"id", "texts", "seed"} per line."""
    table: dict[str, PageReplacement] = {}
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                table[str(raw["id"])] = PageReplacement(
                    texts=tuple(raw["texts"]), seed=raw.get("seed")
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise RenderError(f"{Path(path).name}:{i}: bad replacement record: {exc}") from exc
    return table


def save_replacements(table: Mapping[str, PageReplacement], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for page_id in table:
            rep = table[page_id]
            fh.write(json.dumps(
                {"id": page_id, "texts": list(rep.texts), "seed": rep.seed},
                ensure_ascii=False,
            ))
            fh.write("\n")


def load_render_meta(render_dir: str | Path) -> dict[str, dict]:
    """Read the render metadata sidecar, keyed by page id."""
    path = Path(render_dir) / RENDER_META_NAME
    if not path.is_file():
        raise RenderError(f"render metadata not found: {path}")
    meta: dict[str, dict] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                record = json.loads(line)
                meta[str(record["id"])] = record
    return meta


def render_corpus(
    corpus: Corpus,
    theta: RenderTheta,
    out_dir: str | Path,
    *,
    replacements: Mapping[str, PageReplacement] | None = None,
    metrics: FontMetricsModel | None = None,
    token_counter=None,
) -> Corpus:
    """Render every page of a corpus and write a self-contained output set.

    When ``replacements`` is omitted, each page is re-typeset with its own
    original block texts (the legible-text baseline). The output directory
    receives one PNG per page, a metadata sidecar with token accounting,
    and an annotation manifest whose block texts are the replacements.
    Block geometry in the manifest stays in source-page coordinates.

    ``token_counter`` optionally replaces capacity-based text token counts
    with ``sum(token_counter(text))`` over the typeset texts (see
    ``load_token_counter``).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if metrics is None:
        metrics = theta.metrics()
    new_pages: list[PageAnnotation] = []
    meta_records: list[dict] = []
    for page in corpus.pages:
        if replacements is None:
            rep = PageReplacement(texts=tuple(b.text for b in page.blocks))
        else:
            if page.page_id not in replacements:
                raise RenderError(f"no replacement texts for page {page.page_id}")
            rep = replacements[page.page_id]
        source = None
        if theta.background is Background.INPAINTED_SOURCE:
            source = np.asarray(Image.open(corpus.image_file(page)).convert("RGB"))
        counted = None
        if token_counter is not None:
            counted = sum(token_counter(text) for text in rep.texts)
        rendered = render_page(
            page, rep.texts, theta,
            metrics=metrics, source_image=source, seed=rep.seed,
            text_tokens=counted,
        )
        image_name = f"{page.page_id}.png"
        Image.fromarray(rendered.image).save(out / image_name, format="PNG")
        new_blocks = tuple(
            replace(block, text=text)
            for block, text in zip(page.blocks, rep.texts)
        )
        new_pages.append(replace(page, blocks=new_blocks, image_path=image_name))
        meta_records.append({
            "id": page.page_id,
            "mode": theta.resolution_mode.value,
            "visual_tokens": rendered.visual_tokens,
            "text_tokens": rendered.text_tokens,
            "seed": rendered.seed,
            "theta_hash": theta.theta_hash(),
        })
    out_corpus = Corpus(name=corpus.name, pages=tuple(new_pages),
                        source_style=corpus.source_style, root=out)
    save_corpus(out_corpus, out)
    with open(out / RENDER_META_NAME, "w", encoding="utf-8") as fh:
        for record in meta_records:
            fh.write(json.dumps(record, ensure_ascii=False))
            fh.write("\n")
    return out_corpus
