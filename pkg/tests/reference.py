"""Independent reference implementations used only by the test suite.

Everything here is deliberately written the slow, obvious way, with no
shared code or helper reuse from the package under test, so that agreement
between package and reference is meaningful.
"""

from __future__ import annotations

import math
import sys

from zerodoc.core import BBox, LanguageClass

sys.setrecursionlimit(20000)


def lev_recursive(a: str, b: str) -> int:
    """Plain recursive edit distance with a memo dict."""
    memo: dict[tuple[int, int], int] = {}

    def go(i: int, j: int) -> int:
        if i == 0:
            return j
        if j == 0:
            return i
        key = (i, j)
        hit = memo.get(key)
        if hit is not None:
            return hit
        if a[i - 1] == b[j - 1]:
            sub = go(i - 1, j - 1)
        else:
            sub = go(i - 1, j - 1) + 1
        value = min(go(i - 1, j) + 1, go(i, j - 1) + 1, sub)
        memo[key] = value
        return value

    return go(len(a), len(b))


def lev_matrix(a: str, b: str) -> int:
    """Full-table dynamic-programming edit distance."""
    n, m = len(a), len(b)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        table[i][0] = i
    for j in range(m + 1):
        table[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            table[i][j] = min(
                table[i - 1][j] + 1,
                table[i][j - 1] + 1,
                table[i - 1][j - 1] + cost,
            )
    return table[n][m]


def align_oracle(a: str, b: str) -> tuple[int, int]:
    """(edit distance, most matches achieved by any minimum-cost alignment).

    The table holds (cost, -matches) pairs; both components are additive
    along an alignment, so lexicographic minimization is exact.
    """
    n, m = len(a), len(b)
    table = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        table[i][0] = (i, 0)
    for j in range(m + 1):
        table[0][j] = (j, 0)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            up = (table[i - 1][j][0] + 1, table[i - 1][j][1])
            left = (table[i][j - 1][0] + 1, table[i][j - 1][1])
            dc, dm = table[i - 1][j - 1]
            if a[i - 1] == b[j - 1]:
                diag = (dc, dm - 1)
            else:
                diag = (dc + 1, dm)
            table[i][j] = min(up, left, diag)
    cost, neg_matches = table[n][m]
    return cost, -neg_matches


LATIN_BUFFER = 1.05
LOGOGRAPHIC_BUFFER = 1.01


def font_feasible(text: str, bbox: BBox, metrics, language: LanguageClass,
                  size: int) -> bool:
    """The geometric fit predicate, restated from scratch."""
    beta = LATIN_BUFFER if language is LanguageClass.LATIN else LOGOGRAPHIC_BUFFER
    sim_width = metrics.text_width(text, size)
    lines = max(1, math.floor(sim_width * beta / bbox.w) + 1)
    return lines * metrics.line_height(size) <= bbox.h


def font_size_oracle(text: str, bbox: BBox, metrics,
                     language: LanguageClass) -> int:
    """Exhaustive scan over every candidate size; max feasible or 8."""
    feasible = [
        size
        for size in range(8, min(bbox.h, 100) + 1)
        if font_feasible(text, bbox, metrics, language, size)
    ]
    return max(feasible) if feasible else 8


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes."""
    ix = max(0, min(a.right, b.right) - max(a.x, b.x))
    iy = max(0, min(a.bottom, b.bottom) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union else 0.0


def merge_fixpoint_oracle(boxes: list[BBox], unified: float) -> list[BBox]:
    """Merge ANY qualifying pair until none remains, order-independently.

    A brute-force counterpart to the package's greedy pass; for inputs whose
    cluster structure is unambiguous the fixpoint box set is unique.
    """
    out = list(boxes)
    merged = True
    while merged:
        merged = False
        for i in range(len(out)):
            for j in range(i + 1, len(out)):
                a, b = out[i], out[j]
                dy = abs((a.y + a.h / 2.0) - (b.y + b.h / 2.0))
                gap = max(0.0, max(a.x, b.x) - min(a.x + a.w, b.x + b.w))
                if dy < 0.5 * unified and gap < 1.5 * unified:
                    x0 = min(a.x, b.x)
                    y0 = min(a.y, b.y)
                    x1 = max(a.x + a.w, b.x + b.w)
                    y1 = max(a.y + a.h, b.y + b.h)
                    out[i] = BBox(x0, y0, x1 - x0, y1 - y0)
                    del out[j]
                    merged = True
                    break
            if merged:
                break
    return out
