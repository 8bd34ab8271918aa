"""Core domain types and dataset ingestion.

Everything downstream (layout analysis, rendering, perturbation, the
evaluation harness) speaks in terms of the types defined here: axis-aligned
boxes, annotated text blocks, page annotations, and corpora backed by a
line-delimited JSON manifest.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_NAME = "annotations.jsonl"
CORPUS_META_NAME = "corpus.json"

# Fraction of ASCII characters at or above which text is classified Latin.
DEFAULT_ASCII_THRESHOLD = 0.8


class ZerodocError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(ZerodocError):
    """A domain invariant was violated (bad geometry, counts, or fields)."""


class ManifestError(ZerodocError):
    """An annotation manifest is missing, unreadable, or malformed."""


class LanguageClass(Enum):
    """Script family, which decides how capacity is counted and buffered."""

    LATIN = "latin"
    LOGOGRAPHIC = "logographic"


class Granularity(Enum):
    """Annotation granularity of a page: word boxes or paragraph boxes."""

    WORD = "word"
    PARAGRAPH = "paragraph"


class SourceStyle(Enum):
    """Rough provenance family of a corpus; informational only."""

    FOX_LIKE = "fox_like"
    OMNI_LIKE = "omni_like"
    CUSTOM = "custom"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates: top-left corner plus size."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(
                f"bbox needs positive size, got w={self.w} h={self.h}"
            )
        if self.x < 0 or self.y < 0:
            raise ValidationError(
                f"bbox origin must be non-negative, got x={self.x} y={self.y}"
            )

    @property
    def right(self) -> int:
        return self.x + self.w

    @property
    def bottom(self) -> int:
        return self.y + self.h

    @property
    def x_center(self) -> float:
        return self.x + self.w / 2.0

    @property
    def y_center(self) -> float:
        return self.y + self.h / 2.0

    @property
    def area(self) -> int:
        return self.w * self.h

    def union(self, other: BBox) -> BBox:
        x0 = min(self.x, other.x)
        y0 = min(self.y, other.y)
        x1 = max(self.right, other.right)
        y1 = max(self.bottom, other.bottom)
        return BBox(x0, y0, x1 - x0, y1 - y0)

    def overlaps(self, other: BBox) -> bool:
        return (
            self.x < other.right
            and other.x < self.right
            and self.y < other.bottom
            and other.y < self.bottom
        )

    def fits_in_page(self, page_w: int, page_h: int) -> bool:
        return self.right <= page_w and self.bottom <= page_h

    def clipped(self, page_w: int, page_h: int) -> BBox:
        """Clip to page bounds. Raises if nothing remains inside the page."""
        x1 = min(self.right, page_w)
        y1 = min(self.bottom, page_h)
        if self.x >= x1 or self.y >= y1:
            raise ValidationError(
                f"bbox {self.as_list()} lies entirely outside {page_w}x{page_h} page"
            )
        return BBox(self.x, self.y, x1 - self.x, y1 - self.y)

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


def count_words(text: str) -> int:
    """Number of whitespace-separated tokens."""
    return len(text.split())


def count_chars(text: str) -> int:
    """Number of non-whitespace characters."""
    return sum(1 for ch in text if not ch.isspace())


def detect_language(text: str, ascii_threshold: float = DEFAULT_ASCII_THRESHOLD) -> LanguageClass:
    """Classify text as Latin or Logographic by ASCII character density.

    Args:
        text: Non-empty text to classify.
        ascii_threshold: Minimum fraction of ASCII characters for Latin.

    Returns:
        LanguageClass.LATIN when at least ``ascii_threshold`` of the
        characters are ASCII, LanguageClass.LOGOGRAPHIC otherwise.
    """
    if not text:
        raise ValidationError("cannot classify empty text")
    ascii_count = sum(1 for ch in text if ord(ch) < 128)
    density = ascii_count / len(text)
    if density >= ascii_threshold:
        return LanguageClass.LATIN
    return LanguageClass.LOGOGRAPHIC


def text_capacity(text: str, language: LanguageClass) -> int:
    """Token capacity of a piece of text under the given script family.

    Latin text is counted in whitespace-separated words, logographic text in
    non-whitespace characters.
    """
    if language is LanguageClass.LATIN:
        return count_words(text)
    return count_chars(text)


@dataclass(frozen=True)
class TextBlock:
    """One annotated text region on a page.

    ``font_size``, ``capacity``, and ``language`` start unset on raw
    annotations and are filled in by layout analysis.
    """

    bbox: BBox
    text: str
    font_size: int | None = None
    capacity: int | None = None
    language: LanguageClass | None = None

    def __post_init__(self) -> None:
        if self.font_size is not None and self.font_size < 8:
            raise ValidationError(f"font_size must be >= 8, got {self.font_size}")
        if self.capacity is not None:
            if self.capacity < 0:
                raise ValidationError(f"capacity must be >= 0, got {self.capacity}")
            if self.language is not None:
                expected = text_capacity(self.text, self.language)
                if self.capacity != expected:
                    raise ValidationError(
                        f"capacity {self.capacity} does not match text "
                        f"({expected} {self.language.value} units)"
                    )


@dataclass(frozen=True)
class PageAnnotation:
    """A document page image together with its text-region annotations."""

    page_id: str
    image_path: str
    page_w: int
    page_h: int
    blocks: tuple[TextBlock, ...]
    granularity: Granularity

    def __post_init__(self) -> None:
        if self.page_w <= 0 or self.page_h <= 0:
            raise ValidationError(
                f"page {self.page_id}: size must be positive, "
                f"got {self.page_w}x{self.page_h}"
            )
        for block in self.blocks:
            if not block.bbox.fits_in_page(self.page_w, self.page_h):
                raise ValidationError(
                    f"page {self.page_id}: bbox {block.bbox.as_list()} exceeds "
                    f"{self.page_w}x{self.page_h} page"
                )

    @property
    def text_tokens(self) -> int:
        """Sum of block capacities. Requires capacities to be set."""
        total = 0
        for block in self.blocks:
            if block.capacity is None:
                raise ValidationError(
                    f"page {self.page_id}: block capacity not set; run layout "
                    f"analysis first"
                )
            total += block.capacity
        return total


@dataclass(frozen=True)
class Corpus:
    """A named collection of annotated pages.

    ``root`` records where the corpus was loaded from (for resolving image
    paths) and is excluded from equality so that save/load round trips
    compare equal.
    """

    name: str
    pages: tuple[PageAnnotation, ...]
    source_style: SourceStyle = SourceStyle.CUSTOM
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for page in self.pages:
            if page.page_id in seen:
                raise ValidationError(f"duplicate page id {page.page_id!r}")
            seen.add(page.page_id)

    def __len__(self) -> int:
        return len(self.pages)

    def page(self, page_id: str) -> PageAnnotation:
        for page in self.pages:
            if page.page_id == page_id:
                return page
        raise KeyError(page_id)

    def image_file(self, page: PageAnnotation) -> Path:
        if self.root is None:
            raise ValidationError(
                f"corpus {self.name!r} has no root directory; cannot resolve "
                f"image {page.image_path!r}"
            )
        return self.root / page.image_path


def _parse_block(raw: dict, page_w: int, page_h: int, where: str, clip: bool) -> TextBlock | None:
    try:
        bx = raw["bbox"]
        text = raw["text"]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{where}: block missing field: {exc}") from exc
    if not isinstance(bx, (list, tuple)) or len(bx) != 4:
        raise ManifestError(f"{where}: bbox must be [x, y, w, h], got {bx!r}")
    if not isinstance(text, str):
        raise ManifestError(f"{where}: text must be a string")
    try:
        bbox = BBox(*(int(v) for v in bx))
    except (ValidationError, ValueError) as exc:
        raise ManifestError(f"{where}: bad bbox {bx!r}: {exc}") from exc

    if not bbox.fits_in_page(page_w, page_h):
        if not clip:
            raise ManifestError(
                f"{where}: bbox {bbox.as_list()} exceeds {page_w}x{page_h} page"
            )
        try:
            clipped = bbox.clipped(page_w, page_h)
        except ValidationError as exc:
            raise ManifestError(f"{where}: {exc}") from exc
        logger.warning(
            "%s: clipped bbox %s to %s", where, bbox.as_list(), clipped.as_list()
        )
        bbox = clipped

    language = None
    if raw.get("language") is not None:
        try:
            language = LanguageClass(raw["language"])
        except ValueError as exc:
            raise ManifestError(f"{where}: unknown language {raw['language']!r}") from exc
    try:
        return TextBlock(
            bbox=bbox,
            text=text,
            font_size=raw.get("font_size"),
            capacity=raw.get("capacity"),
            language=language,
        )
    except ValidationError as exc:
        raise ManifestError(f"{where}: {exc}") from exc


def _parse_page(raw: dict, where: str, clip: bool) -> PageAnnotation:
    for key in ("id", "image", "page_w", "page_h", "granularity", "blocks"):
        if key not in raw:
            raise ManifestError(f"{where}: missing field {key!r}")
    try:
        granularity = Granularity(raw["granularity"])
    except ValueError as exc:
        raise ManifestError(
            f"{where}: unknown granularity {raw['granularity']!r}"
        ) from exc
    page_w = int(raw["page_w"])
    page_h = int(raw["page_h"])
    blocks = []
    for j, braw in enumerate(raw["blocks"]):
        block = _parse_block(braw, page_w, page_h, f"{where} block {j}", clip)
        if block is not None:
            blocks.append(block)
    try:
        return PageAnnotation(
            page_id=str(raw["id"]),
            image_path=str(raw["image"]),
            page_w=page_w,
            page_h=page_h,
            blocks=tuple(blocks),
            granularity=granularity,
        )
    except ValidationError as exc:
        raise ManifestError(f"{where}: {exc}") from exc


def iter_manifest(manifest_path: Path, clip: bool = True) -> Iterator[PageAnnotation]:
    """Yield page annotations from a JSONL manifest.

    Args:
        manifest_path: Path to the line-delimited JSON manifest.
        clip: Clip out-of-page boxes (with a warning) instead of rejecting
            the record. Boxes entirely outside the page are always rejected.
    """
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{manifest_path.name}:{i}"
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{where}: invalid JSON: {exc}") from exc
            if not isinstance(raw, dict):
                raise ManifestError(f"{where}: expected an object per line")
            yield _parse_page(raw, where, clip)


def load_corpus(
    path: str | Path,
    *,
    manifest_name: str = MANIFEST_NAME,
    clip: bool = True,
    require_images: bool = True,
) -> Corpus:
    """Load a corpus directory containing a manifest and page images.

    Args:
        path: Corpus directory.
        manifest_name: Manifest file name inside the directory.
        clip: Clip out-of-page boxes instead of rejecting the record.
        require_images: Verify that every referenced image file exists.

    Returns:
        The parsed corpus, with ``root`` set to ``path``.
    """
    root = Path(path)
    pages = tuple(iter_manifest(root / manifest_name, clip=clip))
    name = root.name
    style = SourceStyle.CUSTOM
    meta_path = root / CORPUS_META_NAME
    if meta_path.is_file():
        with open(meta_path, encoding="utf-8") as fh:
            try:
                meta = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{meta_path.name}: invalid JSON: {exc}") from exc
        name = str(meta.get("name", name))
        if "source_style" in meta:
            try:
                style = SourceStyle(meta["source_style"])
            except ValueError as exc:
                raise ManifestError(
                    f"{meta_path.name}: unknown source_style {meta['source_style']!r}"
                ) from exc
    if require_images:
        for page in pages:
            if not (root / page.image_path).is_file():
                raise ManifestError(
                    f"page {page.page_id}: image not found: {root / page.image_path}"
                )
    return Corpus(name=name, pages=pages, source_style=style, root=root)


def page_to_record(page: PageAnnotation) -> dict:
    """Serialize one page to its manifest record."""
    blocks = []
    for block in page.blocks:
        rec: dict = {"bbox": block.bbox.as_list(), "text": block.text}
        if block.font_size is not None:
            rec["font_size"] = block.font_size
        if block.capacity is not None:
            rec["capacity"] = block.capacity
        if block.language is not None:
            rec["language"] = block.language.value
        blocks.append(rec)
    return {
        "id": page.page_id,
        "image": page.image_path,
        "page_w": page.page_w,
        "page_h": page.page_h,
        "granularity": page.granularity.value,
        "blocks": blocks,
    }


def save_corpus(
    corpus: Corpus,
    path: str | Path,
    *,
    manifest_name: str = MANIFEST_NAME,
) -> Path:
    """Write a corpus manifest (and metadata sidecar) into a directory.

    Images are not copied; whoever produced them is responsible for placing
    them next to the manifest. Returns the manifest path.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest_path = root / manifest_name
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for page in corpus.pages:
            fh.write(json.dumps(page_to_record(page), ensure_ascii=False))
            fh.write("\n")
    with open(root / CORPUS_META_NAME, "w", encoding="utf-8") as fh:
        json.dump(
            {"name": corpus.name, "source_style": corpus.source_style.value},
            fh,
            ensure_ascii=False,
        )
        fh.write("\n")
    return manifest_path


def stable_seed(*parts: int | str) -> np.random.SeedSequence:
    """Build a reproducible SeedSequence from mixed int/str key parts.

    String parts are hashed with SHA-256 (not Python's randomized ``hash``)
    so the stream is stable across processes and platforms.
    """
    entropy: list[int] = []
    for part in parts:
        if isinstance(part, str):
            digest = hashlib.sha256(part.encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:8], "big"))
        else:
            entropy.append(int(part) % 2**64)
    return np.random.SeedSequence(entropy)
