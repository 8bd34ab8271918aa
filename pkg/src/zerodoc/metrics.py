"""String accuracy metrics and the accuracy-decoupling arithmetic.

The string side provides Levenshtein distance, normalized edit distance,
and an alignment-based character precision. The decoupling side splits an
end-to-end accuracy into a semantic-prior component (what a model recovers
with no legible text) and a recognition component scaled by a typesetting
quality factor.
"""

from __future__ import annotations

import logging
import unicodedata
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Strings shorter than this use the plain-Python DP; above it the
# vectorized row recurrence wins.
_NUMPY_CUTOFF = 64


def _codepoints(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-32-le"), dtype=np.uint32)


def _lev_python(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        append = cur.append
        for j, cb in enumerate(b, start=1):
            append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _lev_numpy(a: str, b: str) -> int:
    cb = _codepoints(b)
    m = len(cb)
    idx = np.arange(m + 1, dtype=np.int64)
    prev = idx.copy()
    for ch in _codepoints(a):
        cur = np.empty(m + 1, dtype=np.int64)
        cur[0] = prev[0] + 1
        np.minimum(prev[1:] + 1, prev[:-1] + (cb != ch), out=cur[1:])
        # Insertions chain left to right; fold the prefix scan
        # min_{k<=j}(cur[k] + (j-k)) into an accumulate over cur[k]-k.
        acc = np.minimum.accumulate(cur - idx)
        np.minimum(cur, acc + idx, out=cur)
        prev = cur
    return int(prev[-1])


def levenshtein(a: str, b: str) -> int:
    """Edit distance with unit insert, delete, and substitute costs."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(b) > len(a):
        a, b = b, a
    if len(a) < _NUMPY_CUTOFF:
        return _lev_python(a, b)
    return _lev_numpy(a, b)


def _align_python(a: str, b: str, weight: int) -> int:
    prev = [j * weight for j in range(len(b) + 1)]
    for ca in a:
        cur = [prev[0] + weight]
        append = cur.append
        for j, cb in enumerate(b, start=1):
            diag = prev[j - 1] + (weight if ca != cb else -1)
            append(min(prev[j] + weight, cur[j - 1] + weight, diag))
        prev = cur
    return prev[-1]


def _align_numpy(a: str, b: str, weight: int) -> int:
    cb = _codepoints(b)
    m = len(cb)
    idx_w = np.arange(m + 1, dtype=np.int64) * weight
    prev = idx_w.copy()
    for ch in _codepoints(a):
        diag_step = np.where(cb != ch, weight, -1)
        cur = np.empty(m + 1, dtype=np.int64)
        cur[0] = prev[0] + weight
        np.minimum(prev[1:] + weight, prev[:-1] + diag_step, out=cur[1:])
        acc = np.minimum.accumulate(cur - idx_w)
        np.minimum(cur, acc + idx_w, out=cur)
        prev = cur
    return int(prev[-1])


def levenshtein_with_matches(a: str, b: str) -> tuple[int, int]:
    """Edit distance plus the most character matches any optimal (minimum
    cost) alignment achieves.

    Works by minimizing ``cost * (L + 1) - matches`` with ``L`` bounding the
    match count, which orders alignments by cost first and match count
    second.
    """
    if a == b:
        return 0, len(a)
    if not a or not b:
        return max(len(a), len(b)), 0
    weight = len(a) + len(b) + 1
    if max(len(a), len(b)) < _NUMPY_CUTOFF:
        score = _align_python(a, b, weight)
    else:
        score = _align_numpy(a, b, weight)
    bound = weight - 1
    distance = (score + bound) // weight
    matches = distance * weight - score
    return distance, matches


class Ned(NamedTuple):
    """Normalized edit distance and its similarity complement."""

    distance: float
    similarity: float


def ned(a: str, b: str) -> Ned:
    """Levenshtein distance normalized by the longer string's length.

    Two empty strings have distance 0. Similarity is one minus distance,
    so both values always lie in [0, 1].
    """
    longest = max(len(a), len(b))
    if longest == 0:
        return Ned(distance=0.0, similarity=1.0)
    distance = levenshtein(a, b) / longest
    return Ned(distance=distance, similarity=1.0 - distance)


def normalize_text(text: str, casefold: bool = False) -> str:
    """NFKC-normalize, collapse whitespace runs to single spaces, and trim.

    Case folding is off by default.
    """
    text = unicodedata.normalize("NFKC", text)
    if casefold:
        text = text.casefold()
    return " ".join(text.split())


def char_precision(ground_truth: str, prediction: str, casefold: bool = False) -> float:
    """Fraction of normalized ground-truth characters matched by an optimal
    alignment of the prediction.

    Both strings are normalized first so that formatting differences
    (whitespace runs, compatibility forms) are not penalized. Empty
    normalized ground truth scores 1.0 against empty prediction, 0.0
    otherwise.
    """
    gt = normalize_text(ground_truth, casefold)
    pred = normalize_text(prediction, casefold)
    if not gt:
        return 1.0 if not pred else 0.0
    _, matches = levenshtein_with_matches(gt, pred)
    return matches / len(gt)


@dataclass(frozen=True)
class StringMetricResult:
    """Per-sample string accuracy bundle."""

    precision: float
    ned_similarity: float
    ned_distance: float
    gt_len: int
    pred_len: int


def evaluate_strings(ground_truth: str, prediction: str, casefold: bool = False) -> StringMetricResult:
    """Score one prediction against its ground truth.

    Every field is computed on normalized text (see ``normalize_text``), so
    formatting differences never count against either metric and
    ``ned_similarity`` is 1.0 exactly when the normalized strings agree.
    Lengths are normalized character counts.
    """
    gt = normalize_text(ground_truth, casefold)
    pred = normalize_text(prediction, casefold)
    n = ned(gt, pred)
    return StringMetricResult(
        precision=char_precision(gt, pred, casefold),
        ned_similarity=n.similarity,
        ned_distance=n.distance,
        gt_len=len(gt),
        pred_len=len(pred),
    )


def f_prior(f_full: float, f_zero: float) -> float:
    """Semantic-prior component: accuracy retained once legible text is
    removed, subtracted from the full-text accuracy.

    A negative value (model does worse with legible text than without) is
    allowed but logged as anomalous.
    """
    for name, value in (("f_full", f_full), ("f_zero", f_zero)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {value}")
    prior = f_full - f_zero
    if prior < 0:
        logger.warning("negative prior component %.4f (f_full=%.4f f_zero=%.4f)",
                       prior, f_full, f_zero)
    return prior


def k_quality(f_full: float, prior: float, ocr_raw: float) -> float:
    """Typesetting quality factor relating raw recognition ability to the
    recognition share of full accuracy.

    Values above 1 indicate the synthetic pages read better than the raw
    recognition baseline; allowed but logged.
    """
    if ocr_raw <= 0:
        raise ValueError(f"ocr_raw must be positive, got {ocr_raw}")
    quality = (f_full - prior) / ocr_raw
    if quality > 1.0:
        logger.warning("quality factor %.4f exceeds 1 (f_full=%.4f prior=%.4f "
                       "ocr_raw=%.4f)", quality, f_full, prior, ocr_raw)
    return quality


@dataclass(frozen=True)
class LinearCalibration:
    """Raw recognition accuracy modeled linear in the compression ratio."""

    slope: float
    intercept: float
    fit_residual_max: float
    reference_ids: tuple[str, ...] = ()

    def predict(self, ratio: float) -> float:
        value = self.slope * ratio + self.intercept
        return min(1.0, max(0.0, value))


def fit_ocr_raw(
    points: Sequence[tuple[float, float]],
    reference_ids: Sequence[str] = (),
) -> LinearCalibration:
    """Least-squares line through (compression ratio, accuracy) points.

    Args:
        points: At least two (ratio, accuracy) pairs with distinct ratios.
        reference_ids: Optional sample ids recorded for provenance.

    Returns:
        The fitted calibration, with the largest absolute residual stored.
    """
    if len(points) < 2:
        raise ValueError(f"need at least 2 calibration points, got {len(points)}")
    xs = np.array([p[0] for p in points], dtype=float)
    ys = np.array([p[1] for p in points], dtype=float)
    if np.ptp(xs) == 0:
        raise ValueError("calibration points share a single ratio; cannot fit a line")
    slope, intercept = np.polyfit(xs, ys, 1)
    residuals = np.abs(slope * xs + intercept - ys)
    return LinearCalibration(
        slope=float(slope),
        intercept=float(intercept),
        fit_residual_max=float(residuals.max()),
        reference_ids=tuple(reference_ids),
    )


@dataclass(frozen=True)
class DecoupledPoint:
    """Decoupled accuracy components for one compression bin.

    ``ned_prior`` is the edit-distance-channel counterpart of ``f_prior``:
    mean edit distance with legible text minus mean edit distance without
    it, so negative values mean the output degrades once priors are gone.
    It is reported in its own column and never mixed into the precision
    channel.
    """

    bin_center: float
    f_full: float
    f_zero: float
    f_prior: float
    ocr_raw: float
    k_quality: float
    dataset: str = ""
    aggregation: str = "bin_mean"
    n_full: int = 0
    n_zero: int = 0
    empty: bool = False
    anomalous: bool = False
    ned_prior: float = float("nan")


@dataclass(frozen=True)
class StrategyScore:
    """Best-case expected accuracy delta of a construction strategy."""

    per_model: dict[str, float]
    score: float

    def is_information_preserving(self, epsilon: float = 0.01) -> bool:
        return self.score >= -epsilon


def strategy_score(deltas_by_model: Mapping[str, Sequence[float]]) -> StrategyScore:
    """Score a strategy from per-model accuracy deltas.

    Each delta is (accuracy on the rendered page) minus (accuracy on the
    plain text prompt) for one sample. The strategy score is the maximum
    over models of the mean delta.
    """
    if not deltas_by_model:
        raise ValueError("need deltas for at least one model")
    per_model: dict[str, float] = {}
    for model, deltas in deltas_by_model.items():
        if len(deltas) == 0:
            raise ValueError(f"model {model!r} has no delta samples")
        per_model[model] = float(np.mean(deltas))
    return StrategyScore(per_model=per_model, score=max(per_model.values()))
