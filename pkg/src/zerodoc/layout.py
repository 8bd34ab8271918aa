"""Bottom-up layout extraction from word-level annotations.

Word boxes are split into columns using a vertical projection profile, then
greedily merged into paragraph regions. A geometry-constrained solver picks
the largest font size whose wrapped rendering fits each region, and capacity
counting turns region text into a token budget. The result is the full
generation parameter set for a page: boxes, font sizes, capacities, and
script classes.
"""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    BBox,
    Granularity,
    LanguageClass,
    PageAnnotation,
    TextBlock,
    ValidationError,
    ZerodocError,
    detect_language,
    text_capacity,
)
from .fonts import FontMetricsModel, buffer_coefficient

logger = logging.getLogger(__name__)

MIN_FONT_SIZE = 8
MAX_FONT_SIZE = 100

# Boxes at or below this height are treated as noise when estimating the
# page's unified line height.
MIN_BOX_HEIGHT = 8


class LayoutError(ZerodocError):
    """Layout reconstruction failed (empty page, degenerate geometry)."""


@dataclass(frozen=True)
class LayoutParams:
    """Tuning constants for column splitting and box merging.

    The thresholds all derive from the page's unified line height: the
    projection-density cut for treating a pixel column as background, the
    narrowest whitespace run accepted as a column gap, and the merge
    distances.
    """

    unified_height: float
    noise_threshold: float
    min_gap: float
    merge_dy_factor: float = 0.5
    merge_dx_factor: float = 1.5

    @classmethod
    def from_unified_height(cls, unified_height: float) -> LayoutParams:
        if unified_height <= 0:
            raise LayoutError(f"unified height must be positive, got {unified_height}")
        return cls(
            unified_height=unified_height,
            noise_threshold=3.0 * unified_height,
            min_gap=0.8 * unified_height,
        )


def unified_line_height(blocks: list[TextBlock] | tuple[TextBlock, ...],
                        min_box_height: int = MIN_BOX_HEIGHT) -> float:
    """Median height of boxes taller than ``min_box_height``.

    Raises LayoutError when no box clears the noise floor.
    """
    heights = [b.bbox.h for b in blocks if b.bbox.h > min_box_height]
    if not heights:
        raise LayoutError(
            f"no box taller than {min_box_height}px; cannot estimate line height"
        )
    return float(statistics.median(heights))


def projection_profile(blocks: list[TextBlock] | tuple[TextBlock, ...], page_w: int) -> np.ndarray:
    """Vertical projection: per pixel column, the summed heights of boxes
    whose horizontal span covers it. Length equals ``page_w``.
    """
    if page_w <= 0:
        raise LayoutError(f"page width must be positive, got {page_w}")
    profile = np.zeros(page_w, dtype=float)
    for block in blocks:
        x0 = max(0, block.bbox.x)
        x1 = min(page_w, block.bbox.right)
        if x1 > x0:
            profile[x0:x1] += block.bbox.h
    return profile


def _low_density_runs(profile: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Half-open [start, end) runs where the profile sits below threshold."""
    below = profile < threshold
    runs: list[tuple[int, int]] = []
    start = None
    for i, flag in enumerate(below):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(below)))
    return runs


def split_columns(
    blocks: list[TextBlock] | tuple[TextBlock, ...],
    page_w: int,
    params: LayoutParams,
) -> list[list[TextBlock]]:
    """Partition blocks into columns at wide low-density runs of the profile.

    Runs touching either page edge are margins, not column gaps. Pages whose
    entire profile sits below the noise threshold are kept as one column.
    Columns are returned left to right; blocks keep their input order.
    """
    profile = projection_profile(blocks, page_w)
    if bool((profile < params.noise_threshold).all()):
        logger.info("sparse page: projection never clears noise threshold; "
                    "treating as a single column")
        return [list(blocks)]
    cuts: list[float] = []
    for start, end in _low_density_runs(profile, params.noise_threshold):
        if start == 0 or end == page_w:
            continue  # page margin, not an inter-column gap
        if end - start >= params.min_gap:
            cuts.append((start + end) / 2.0)
    if not cuts:
        return [list(blocks)]
    cuts.sort()
    columns: list[list[TextBlock]] = [[] for _ in range(len(cuts) + 1)]
    for block in blocks:
        idx = sum(1 for c in cuts if block.bbox.x_center >= c)
        columns[idx].append(block)
    return [col for col in columns if col]


def horizontal_gap(a: BBox, b: BBox) -> float:
    """Pixel gap between the x-spans of two boxes; 0 when they overlap."""
    return max(0.0, float(max(a.x, b.x) - min(a.right, b.right)))


def _mergeable(a: BBox, b: BBox, params: LayoutParams) -> bool:
    dy = abs(a.y_center - b.y_center)
    if dy >= params.merge_dy_factor * params.unified_height:
        return False
    return horizontal_gap(a, b) < params.merge_dx_factor * params.unified_height


@dataclass
class _Cluster:
    bbox: BBox
    members: list[TextBlock]

    @classmethod
    def of(cls, block: TextBlock) -> _Cluster:
        return cls(bbox=block.bbox, members=[block])

    def absorb(self, other: _Cluster) -> None:
        self.bbox = self.bbox.union(other.bbox)
        self.members.extend(other.members)


def _merge_pass(clusters: list[_Cluster], params: LayoutParams) -> tuple[list[_Cluster], bool]:
    """One greedy pass: pop the head, absorb every mergeable cluster
    (rescanning after each absorption), emit, repeat. Ties resolve by input
    order because the scan is in input order.
    """
    pending = list(clusters)
    done: list[_Cluster] = []
    changed = False
    while pending:
        current = pending.pop(0)
        scan = True
        while scan:
            scan = False
            for i, other in enumerate(pending):
                if _mergeable(current.bbox, other.bbox, params):
                    current.absorb(other)
                    del pending[i]
                    changed = True
                    scan = True
                    break
        done.append(current)
    return done, changed


def group_lines_of_blocks(blocks: list[TextBlock] | tuple[TextBlock, ...],
                          unified_height: float,
                          band_factor: float = 0.5) -> list[list[TextBlock]]:
    """Band blocks into text lines by vertical center, each line sorted
    left to right and lines ordered top to bottom. A block opens a new line
    when its center sits at least ``band_factor * unified_height`` below the
    current line's anchor (the first block of the line).
    """
    if not blocks:
        return []
    by_y = sorted(blocks, key=lambda b: (b.bbox.y_center, b.bbox.x))
    lines: list[list[TextBlock]] = [[by_y[0]]]
    anchor = by_y[0].bbox.y_center
    for block in by_y[1:]:
        if block.bbox.y_center - anchor < band_factor * unified_height:
            lines[-1].append(block)
        else:
            lines.append([block])
            anchor = block.bbox.y_center
    return [sorted(line, key=lambda b: b.bbox.x) for line in lines]


def reading_order(blocks: list[TextBlock], unified_height: float,
                  band_factor: float = 0.5) -> list[TextBlock]:
    """Flatten blocks into reading order: line bands top to bottom, left to
    right within each band.
    """
    ordered: list[TextBlock] = []
    for line in group_lines_of_blocks(blocks, unified_height, band_factor):
        ordered.extend(line)
    return ordered


def _finish_cluster(cluster: _Cluster, params: LayoutParams) -> TextBlock:
    ordered = reading_order(cluster.members, params.unified_height,
                            params.merge_dy_factor)
    text = " ".join(b.text for b in ordered)
    return TextBlock(bbox=cluster.bbox, text=text)


def merge_blocks(blocks: list[TextBlock], params: LayoutParams) -> list[TextBlock]:
    """Greedily merge blocks whose centers are vertically close and whose
    x-spans are near or overlapping, iterating until no pair can merge.

    Merged text is the constituent texts joined in reading order. The output
    carries no font size or capacity; those come from later stages.
    """
    clusters = [_Cluster.of(b) for b in blocks]
    while True:
        clusters, changed = _merge_pass(clusters, params)
        if not changed:
            break
    merged = [_finish_cluster(c, params) for c in clusters]
    merged.sort(key=lambda b: (b.bbox.y, b.bbox.x))
    return merged


def reconstruct_paragraphs(
    blocks: list[TextBlock] | tuple[TextBlock, ...],
    page_w: int,
    params: LayoutParams | None = None,
) -> list[TextBlock]:
    """Rebuild paragraph regions from word-level boxes.

    Args:
        blocks: Word-level text blocks.
        page_w: Page width in pixels, bounding the projection profile.
        params: Optional layout constants; derived from the page's unified
            line height when omitted.

    Returns:
        Merged paragraph blocks, columns left to right, top to bottom
        within a column.
    """
    if not blocks:
        raise LayoutError("cannot reconstruct layout of a page with no blocks")
    if params is None:
        params = LayoutParams.from_unified_height(unified_line_height(blocks))
    out: list[TextBlock] = []
    for column in split_columns(blocks, page_w, params):
        out.extend(merge_blocks(column, params))
    return out


def solve_font_size(
    text: str,
    bbox: BBox,
    metrics: FontMetricsModel,
    language: LanguageClass,
) -> int:
    """Largest font size whose wrapped rendering of ``text`` fits ``bbox``.

    Scans sizes downward from min(box height, 100) to 8. A candidate passes
    when the estimated number of wrapped lines, each occupying the model's
    line height, fits within the box height. The single-line width estimate
    is padded by a script-dependent buffer before dividing by the box width.
    Falls back to 8 when nothing fits.
    """
    if not text.strip():
        raise ValidationError("cannot solve font size for empty text")
    beta = buffer_coefficient(language)
    start = min(bbox.h, MAX_FONT_SIZE)
    for size in range(start, MIN_FONT_SIZE - 1, -1):
        sim_width = metrics.text_width(text, size)
        sim_height = metrics.line_height(size)
        required_lines = max(1, math.floor(sim_width * beta / bbox.w) + 1)
        if required_lines * sim_height <= bbox.h:
            return size
    return MIN_FONT_SIZE


def required_line_count(
    text: str,
    bbox: BBox,
    metrics: FontMetricsModel,
    language: LanguageClass,
    size: int,
) -> int:
    """Line count the solver assumed for ``text`` at ``size`` in ``bbox``.

    The typesetter wraps to exactly this many lines so that fitted sizes
    stay consistent between solving and rendering.
    """
    beta = buffer_coefficient(language)
    sim_width = metrics.text_width(text, size)
    return max(1, math.floor(sim_width * beta / bbox.w) + 1)


def compute_capacity(text: str, language: LanguageClass) -> int:
    """Token capacity of a block: words for Latin, characters otherwise."""
    return text_capacity(text, language)


def extract_theta(
    page: PageAnnotation,
    metrics: FontMetricsModel,
    *,
    ascii_threshold: float | None = None,
    params: LayoutParams | None = None,
) -> PageAnnotation:
    """Derive the generation parameters for one page.

    Word-level pages are first merged into paragraph regions. Every region
    is then classified by script, capacity-counted, and assigned the largest
    fitting font size. Regions with empty text are dropped with a warning.

    Returns a paragraph-granularity page whose blocks carry font_size,
    capacity, and language.
    """
    blocks: list[TextBlock] = list(page.blocks)
    if page.granularity is Granularity.WORD:
        blocks = reconstruct_paragraphs(blocks, page.page_w, params)
    out: list[TextBlock] = []
    for block in blocks:
        if not block.text.strip():
            logger.warning(
                "page %s: dropping block at %s with empty text",
                page.page_id, block.bbox.as_list(),
            )
            continue
        if ascii_threshold is None:
            language = detect_language(block.text)
        else:
            language = detect_language(block.text, ascii_threshold)
        out.append(replace(
            block,
            font_size=solve_font_size(block.text, block.bbox, metrics, language),
            capacity=compute_capacity(block.text, language),
            language=language,
        ))
    return replace(page, blocks=tuple(out), granularity=Granularity.PARAGRAPH)
