"""Two-stage word-order perturbation that keeps page geometry intact.

Word boxes are banded into text lines; lines of near-equal height form
exchange groups whose contents are permuted across line slots; finally the
words inside each line are shuffled while the sequence of inter-word gaps
is preserved, so every line keeps its left edge and total span. Applied to
a page image, the original word crops are moved onto an inpainted
background, which destroys word order while leaving pixel statistics and
layout untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import (
    BBox,
    Granularity,
    PageAnnotation,
    TextBlock,
    ZerodocError,
    stable_seed,
)
from .layout import group_lines_of_blocks, unified_line_height
from .renderer import inpaint_regions

logger = logging.getLogger(__name__)

DEFAULT_HEIGHT_TOLERANCE = 0.05
MAX_SHUFFLE_ATTEMPTS = 20


class PerturbError(ZerodocError):
    """Perturbation preconditions not met."""


@dataclass(frozen=True)
class Line:
    """One text line: its word blocks (left to right) and their union box."""

    words: tuple[TextBlock, ...]
    bbox: BBox

    @property
    def height(self) -> int:
        return self.bbox.h


def extract_lines(blocks: Sequence[TextBlock], band_factor: float = 0.5) -> list[Line]:
    """Band word blocks into text lines ordered top to bottom."""
    if not blocks:
        raise PerturbError("page has no word blocks")
    unified = unified_line_height(list(blocks))
    lines: list[Line] = []
    for words in group_lines_of_blocks(list(blocks), unified, band_factor):
        box = words[0].bbox
        for word in words[1:]:
            box = box.union(word.bbox)
        lines.append(Line(words=tuple(words), bbox=box))
    return lines


@dataclass(frozen=True)
class LineGroup:
    """Line indices whose heights agree within tolerance."""

    members: tuple[int, ...]
    representative_height: int


def group_lines(lines: Sequence[Line],
                tolerance: float = DEFAULT_HEIGHT_TOLERANCE) -> list[LineGroup]:
    """Partition lines into exchange groups by height.

    Lines are visited tallest first; each joins the first group whose
    representative (tallest member) is within ``tolerance`` of the line's
    own height, else it opens a new group. Groups are returned in creation
    order with members sorted by line index.
    """
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    order = sorted(range(len(lines)), key=lambda i: (-lines[i].height, i))
    reps: list[int] = []
    members: list[list[int]] = []
    for idx in order:
        height = lines[idx].height
        for gi, rep in enumerate(reps):
            # rep >= height because of the descending visit order
            if rep - height <= tolerance * height:
                members[gi].append(idx)
                break
        else:
            reps.append(height)
            members.append([idx])
    return [
        LineGroup(members=tuple(sorted(group)), representative_height=rep)
        for rep, group in zip(reps, members)
    ]


def _check_partition(groups: Sequence[LineGroup], n_lines: int) -> None:
    seen = [idx for group in groups for idx in group.members]
    if sorted(seen) != list(range(n_lines)):
        raise PerturbError(
            f"groups do not partition {n_lines} lines: indices {sorted(seen)}"
        )


def _line_assignment(groups: Sequence[LineGroup], n_lines: int,
                     seed_parts: tuple) -> list[int]:
    """Slot -> source line index after permuting within each group."""
    assignment = list(range(n_lines))
    for gi, group in enumerate(groups):
        rng = np.random.default_rng(stable_seed(*seed_parts, "lines", gi))
        perm = rng.permutation(len(group.members))
        for slot_pos, src_pos in enumerate(perm):
            assignment[group.members[slot_pos]] = group.members[int(src_pos)]
    return assignment


def _clamped_shift(src: Line, slot: Line, page_w: int, page_h: int) -> tuple[int, int]:
    """Top-left shift moving src content into slot, kept inside the page.

    For group mates of equal size this is the exact slot delta; small height
    differences within tolerance may be clamped at page borders.
    """
    dx = slot.bbox.x - src.bbox.x
    dy = slot.bbox.y - src.bbox.y
    dx = max(min(dx, page_w - src.bbox.right), -src.bbox.x)
    dy = max(min(dy, page_h - src.bbox.bottom), -src.bbox.y)
    return dx, dy


def _shift_block(block: TextBlock, dx: int, dy: int) -> TextBlock:
    box = block.bbox
    return replace(block, bbox=BBox(box.x + dx, box.y + dy, box.w, box.h))


def permute_lines(page: PageAnnotation, groups: Sequence[LineGroup],
                  seed: int) -> PageAnnotation:
    """Permute line contents within exchange groups; line slots stay put.

    ``groups`` must partition the lines of ``extract_lines(page.blocks)``.
    Word boxes of a moved line are translated by their slot's top-left
    delta, so each slot keeps its origin and receives content of
    near-identical height. Blocks are returned in reading order.
    """
    lines = extract_lines(page.blocks)
    _check_partition(groups, len(lines))
    assignment = _line_assignment(groups, len(lines), (seed,))
    new_blocks: list[TextBlock] = []
    for slot_idx, src_idx in enumerate(assignment):
        src, slot = lines[src_idx], lines[slot_idx]
        dx, dy = _clamped_shift(src, slot, page.page_w, page.page_h)
        new_blocks.extend(_shift_block(w, dx, dy) for w in src.words)
    return replace(page, blocks=tuple(new_blocks))


def _gap_preserving_layout(
    words: Sequence[TextBlock],
    rng: np.random.Generator,
) -> list[tuple[int, BBox]]:
    """Shuffle word order but re-run the original gap sequence left to right.

    Returns (original word index, new box) pairs in placement order. The
    total span is invariant by construction; a draw is only rejected (and
    resampled, up to a bounded number of attempts) if an intermediate
    position would leave the page on the left.
    """
    n = len(words)
    if n <= 1:
        return [(i, w.bbox) for i, w in enumerate(words)]
    gaps = [words[i + 1].bbox.x - words[i].bbox.right for i in range(n - 1)]
    x_start = words[0].bbox.x
    for _ in range(MAX_SHUFFLE_ATTEMPTS):
        perm = [int(i) for i in rng.permutation(n)]
        placed: list[tuple[int, BBox]] = []
        x = x_start
        ok = True
        for k, pi in enumerate(perm):
            box = words[pi].bbox
            if x < 0:
                ok = False
                break
            placed.append((pi, BBox(x, box.y, box.w, box.h)))
            if k < n - 1:
                x += box.w + gaps[k]
        if ok:
            return placed
    logger.warning("no valid word shuffle after %d attempts; keeping order",
                   MAX_SHUFFLE_ATTEMPTS)
    return [(i, w.bbox) for i, w in enumerate(words)]


def shuffle_words_in_line(words: Sequence[TextBlock],
                          seed: int) -> tuple[TextBlock, ...]:
    """Reorder the words of one line, preserving the gap sequence.

    Words are sorted left to right, a permutation is drawn, and the words
    are laid out again from the original left edge using the original gaps
    in their original order. The line's total span never changes. Returns
    the blocks in their new left-to-right order.
    """
    ordered = sorted(words, key=lambda w: w.bbox.x)
    rng = np.random.default_rng(stable_seed(seed))
    layout = _gap_preserving_layout(ordered, rng)
    return tuple(replace(ordered[pi], bbox=box) for pi, box in layout)


def build_shuffled_set(
    page: PageAnnotation,
    image: np.ndarray,
    n_permutations: int,
    seed: int,
    *,
    tolerance: float = DEFAULT_HEIGHT_TOLERANCE,
    band_factor: float = 0.5,
) -> list[tuple[np.ndarray, PageAnnotation]]:
    """Produce shuffled variants of a word-annotated page image.

    Every variant moves the original word crops onto an inpainted
    background according to one two-stage perturbation (line exchange, then
    in-line word shuffle). Annotations are updated to the moved positions
    with blocks in reading order; variant k of page P gets id ``P-shufk``.
    """
    if page.granularity is not Granularity.WORD:
        raise PerturbError(
            f"page {page.page_id}: shuffling needs word granularity, "
            f"got {page.granularity.value}"
        )
    arr = np.asarray(image)
    if arr.shape[0] != page.page_h or arr.shape[1] != page.page_w:
        raise PerturbError(
            f"page {page.page_id}: image is {arr.shape[1]}x{arr.shape[0]}, "
            f"annotation says {page.page_w}x{page.page_h}"
        )
    if n_permutations < 1:
        raise ValueError(f"n_permutations must be >= 1, got {n_permutations}")
    lines = extract_lines(page.blocks, band_factor)
    groups = group_lines(lines, tolerance)
    all_words = [w for line in lines for w in line.words]
    background = inpaint_regions(arr, [w.bbox for w in all_words])
    crops: dict[tuple[int, int], np.ndarray] = {}
    for li, line in enumerate(lines):
        for wi, word in enumerate(line.words):
            box = word.bbox
            crops[(li, wi)] = arr[box.y:box.bottom, box.x:box.right].copy()

    variants: list[tuple[np.ndarray, PageAnnotation]] = []
    for k in range(n_permutations):
        assignment = _line_assignment(groups, len(lines),
                                      (seed, page.page_id, k))
        canvas = background.copy()
        new_blocks: list[TextBlock] = []
        for slot_idx, src_idx in enumerate(assignment):
            src, slot = lines[src_idx], lines[slot_idx]
            dx, dy = _clamped_shift(src, slot, page.page_w, page.page_h)
            moved = [_shift_block(w, dx, dy) for w in src.words]
            rng = np.random.default_rng(
                stable_seed(seed, page.page_id, k, "words", slot_idx))
            for wi, box in _gap_preserving_layout(moved, rng):
                crop = crops[(src_idx, wi)]
                canvas[box.y:box.bottom, box.x:box.right] = crop
                new_blocks.append(replace(moved[wi], bbox=box))
        variant_id = f"{page.page_id}-shuf{k}"
        annotation = replace(
            page,
            page_id=variant_id,
            image_path=f"{variant_id}.png",
            blocks=tuple(new_blocks),
        )
        variants.append((canvas, annotation))
    return variants
