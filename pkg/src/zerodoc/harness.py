"""Evaluation harness: model clients, sweep execution, and reporting.

The harness feeds rendered pages to a vision model client, scores the
transcriptions, groups samples into compression-ratio bins, and splits the
per-bin accuracy into its prior and recognition components using a raw
recognition calibration. Everything is written to disk incrementally so an
interrupted sweep resumes where it stopped.
"""

from __future__ import annotations

import base64
import csv
import json
import logging
import os
import threading
import time
import urllib.request
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Corpus, PageAnnotation, ZerodocError, load_corpus
from .metrics import (
    DecoupledPoint,
    LinearCalibration,
    StringMetricResult,
    StrategyScore,
    evaluate_strings,
    f_prior,
    k_quality,
)
from .renderer import load_render_meta, token_ratio

logger = logging.getLogger(__name__)

DEFAULT_INSTRUCTION = "Transcribe all text in the image."
DEFAULT_BIN_CENTERS = (2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 17.5)
DEFAULT_BIN_HALF_WIDTH = 1.25

AGGREGATION_MODES = ("bin_mean", "per_sample")


class HarnessError(ZerodocError):
    """Evaluation could not run (client failure, mismatched inputs)."""


@dataclass(frozen=True)
class RatioBins:
    """Half-open compression-ratio bins [center - hw, center + hw)."""

    centers: tuple[float, ...] = DEFAULT_BIN_CENTERS
    half_width: float = DEFAULT_BIN_HALF_WIDTH

    def __post_init__(self) -> None:
        if self.half_width <= 0:
            raise ValueError(f"half_width must be positive, got {self.half_width}")
        if not self.centers:
            raise ValueError("need at least one bin center")
        for a, b in zip(self.centers, self.centers[1:]):
            if b - a < 2 * self.half_width:
                raise ValueError(f"bins at {a} and {b} overlap")

    def assign(self, ratio: float) -> float | None:
        """Bin center for a ratio, or None when it falls outside all bins."""
        for center in self.centers:
            if center - self.half_width <= ratio < center + self.half_width:
                return center
        return None


@dataclass(frozen=True)
class SweepConfig:
    """Everything an evaluation sweep holds fixed across pages."""

    bins: RatioBins = RatioBins()
    modes: tuple[str, ...] = ("base",)
    seeds: tuple[int, ...] = (0,)
    instruction: str = DEFAULT_INSTRUCTION

    def __post_init__(self) -> None:
        if not self.modes:
            raise ValueError("need at least one resolution mode to sweep")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if not self.instruction:
            raise ValueError("instruction prompt must be non-empty")


def page_ground_truth(page: PageAnnotation) -> str:
    """Reference transcription of a page: block texts in block order."""
    return "\n".join(block.text for block in page.blocks)


class ModelClient(ABC):
    """A vision model that transcribes page images."""

    name: str = "model"

    @abstractmethod
    def predict(self, instruction: str, image_path: Path,
                page_id: str | None = None) -> str:
        """Transcription for one page image."""


class EchoClient(ModelClient):
    """Returns stored reference text; the lossless upper-bound stub."""

    def __init__(self, truths: Mapping[str, str], name: str = "echo"):
        self.truths = dict(truths)
        self.name = name

    @classmethod
    def from_corpus(cls, corpus: Corpus, name: str = "echo") -> EchoClient:
        return cls({p.page_id: page_ground_truth(p) for p in corpus.pages}, name=name)

    def predict(self, instruction: str, image_path: Path,
                page_id: str | None = None) -> str:
        if page_id is None or page_id not in self.truths:
            raise HarnessError(f"echo client has no text for page {page_id!r}")
        return self.truths[page_id]


class FileStubClient(ModelClient):
    """Replays predictions from a JSONL file keyed by page id."""

    def __init__(self, source: str | Path | Mapping[str, str], name: str = "file-stub"):
        self.name = name
        if isinstance(source, Mapping):
            self.predictions = dict(source)
            return
        self.predictions = {}
        with open(source, encoding="utf-8") as fh:
            for i, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                    self.predictions[str(record["id"])] = str(record["prediction"])
                except (json.JSONDecodeError, KeyError) as exc:
                    raise HarnessError(
                        f"{Path(source).name}:{i}: bad prediction record: {exc}"
                    ) from exc

    def predict(self, instruction: str, image_path: Path,
                page_id: str | None = None) -> str:
        if page_id is None or page_id not in self.predictions:
            raise HarnessError(f"no stored prediction for page {page_id!r}")
        return self.predictions[page_id]


class HttpVisionClient(ModelClient):
    """Posts a base64 page image plus instruction to an HTTP endpoint.

    The endpoint receives ``{"instruction", "image", "page_id"}`` and must
    answer ``{"text": "..."}``. Transient failures are retried with
    exponential backoff. Set ``auth_token_env`` to the name of an
    environment variable holding a bearer token.
    """

    def __init__(self, endpoint: str, name: str = "http", timeout: float = 60.0,
                 retries: int = 2, backoff: float = 0.5,
                 auth_token_env: str | None = None):
        self.endpoint = endpoint
        self.name = name
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.auth_token_env = auth_token_env

    def predict(self, instruction: str, image_path: Path,
                page_id: str | None = None) -> str:
        payload = {
            "instruction": instruction,
            "image": base64.b64encode(Path(image_path).read_bytes()).decode("ascii"),
            "page_id": page_id,
        }
        headers = {"Content-Type": "application/json"}
        if self.auth_token_env:
            token = os.environ.get(self.auth_token_env)
            if not token:
                raise HarnessError(
                    f"auth token environment variable {self.auth_token_env} is not set"
                )
            headers["Authorization"] = f"Bearer {token}"
        body = json.dumps(payload).encode("utf-8")
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            request = urllib.request.Request(self.endpoint, data=body, headers=headers)
            try:
                with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                    reply = json.loads(resp.read().decode("utf-8"))
                return str(reply["text"])
            except (OSError, json.JSONDecodeError, KeyError) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
        raise HarnessError(
            f"endpoint {self.endpoint} failed after {self.retries + 1} attempts: "
            f"{last_error}"
        )


@dataclass(frozen=True)
class EvalRecord:
    """One scored page transcription."""

    page_id: str
    dataset: str
    model: str
    ratio: float
    text_tokens: int
    visual_tokens: int
    ground_truth: str
    prediction: str
    metrics: StringMetricResult | None
    instruction: str = DEFAULT_INSTRUCTION
    error: str | None = None

    def to_json(self) -> str:
        record = asdict(self)
        return json.dumps(record, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> EvalRecord:
        raw = json.loads(line)
        metrics = raw.get("metrics")
        raw["metrics"] = StringMetricResult(**metrics) if metrics else None
        return cls(**raw)


def load_records(path: str | Path) -> list[EvalRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(EvalRecord.from_json(line))
    return records


def save_records(records: Sequence[EvalRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_json())
            fh.write("\n")


def run_eval(
    render_dir: str | Path,
    client: ModelClient,
    *,
    dataset: str = "original",
    instruction: str = DEFAULT_INSTRUCTION,
    jobs: int = 1,
    casefold: bool = False,
    records_path: str | Path | None = None,
) -> list[EvalRecord]:
    """Transcribe and score every page of a rendered corpus directory.

    The directory must contain the annotation manifest, the page images,
    and the render metadata sidecar. When ``records_path`` is given, records
    are appended as pages complete and pages already present in the file
    (same model and dataset) are skipped, which makes interrupted runs
    resumable. Client failures produce records with an ``error`` field and
    no metrics; those are excluded from downstream aggregation.
    """
    render_dir = Path(render_dir)
    corpus = load_corpus(render_dir)
    meta = load_render_meta(render_dir)
    missing = [p.page_id for p in corpus.pages if p.page_id not in meta]
    if missing:
        raise HarnessError(f"pages missing render metadata: {missing[:5]}")

    existing: list[EvalRecord] = []
    done: set[str] = set()
    if records_path is not None and Path(records_path).is_file():
        for record in load_records(records_path):
            existing.append(record)
            if record.model == client.name and record.dataset == dataset:
                done.add(record.page_id)
        if done:
            logger.info("resuming: %d pages already evaluated", len(done))

    pending = [p for p in corpus.pages if p.page_id not in done]
    lock = threading.Lock()
    sink = None
    if records_path is not None:
        sink = open(records_path, "a", encoding="utf-8")

    def evaluate_page(page: PageAnnotation) -> EvalRecord:
        page_meta = meta[page.page_id]
        ratio = token_ratio(int(page_meta["text_tokens"]),
                            int(page_meta["visual_tokens"]))
        truth = page_ground_truth(page)
        try:
            prediction = client.predict(instruction, corpus.image_file(page),
                                        page.page_id)
            error = None
            scored = evaluate_strings(truth, prediction, casefold)
        except Exception as exc:  # client errors must not kill the sweep
            logger.warning("page %s: client failed: %s", page.page_id, exc)
            prediction = ""
            error = str(exc)
            scored = None
        record = EvalRecord(
            page_id=page.page_id,
            dataset=dataset,
            model=client.name,
            ratio=ratio,
            text_tokens=int(page_meta["text_tokens"]),
            visual_tokens=int(page_meta["visual_tokens"]),
            ground_truth=truth,
            prediction=prediction,
            metrics=scored,
            instruction=instruction,
            error=error,
        )
        if sink is not None:
            with lock:
                sink.write(record.to_json())
                sink.write("\n")
                sink.flush()
        return record

    try:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                new_records = list(pool.map(evaluate_page, pending))
        else:
            new_records = [evaluate_page(p) for p in pending]
    finally:
        if sink is not None:
            sink.close()

    records = existing + new_records
    records.sort(key=lambda r: (r.dataset, r.model, r.page_id))
    return records


def bin_records(records: Sequence[EvalRecord],
                bins: RatioBins) -> dict[float, list[EvalRecord]]:
    """Group scorable records by ratio bin, dropping errored and out-of-range
    samples (with a count in the log)."""
    grouped: dict[float, list[EvalRecord]] = {c: [] for c in bins.centers}
    dropped = 0
    for record in records:
        if record.metrics is None:
            dropped += 1
            continue
        center = bins.assign(record.ratio)
        if center is None:
            dropped += 1
            continue
        grouped[center].append(record)
    if dropped:
        logger.info("binning dropped %d of %d records (errors or out of range)",
                    dropped, len(records))
    return grouped


def _mean_precision(records: Sequence[EvalRecord]) -> float:
    return float(np.mean([r.metrics.precision for r in records]))


def _mean_ned(records: Sequence[EvalRecord]) -> float:
    return float(np.mean([r.metrics.ned_distance for r in records]))


def decouple(
    full_records: Sequence[EvalRecord],
    zero_records: Sequence[EvalRecord],
    calibration: LinearCalibration,
    *,
    bins: RatioBins | None = None,
    aggregation: str = "bin_mean",
    dataset: str = "",
) -> list[DecoupledPoint]:
    """Split per-bin accuracy into prior and recognition components.

    ``full_records`` score pages rendered with their real text,
    ``zero_records`` pages rendered with semantics-free text at the same
    geometry. With ``bin_mean`` aggregation the decomposition runs on bin
    means and the component identities hold exactly per bin; with
    ``per_sample`` it runs per paired page (matched by id) and the bin
    reports sample means of the per-page components.
    """
    if aggregation not in AGGREGATION_MODES:
        raise ValueError(f"aggregation must be one of {AGGREGATION_MODES}, "
                         f"got {aggregation!r}")
    if bins is None:
        bins = RatioBins()
    full_bins = bin_records(full_records, bins)
    zero_bins = bin_records(zero_records, bins)
    points: list[DecoupledPoint] = []
    for center in bins.centers:
        full_in = full_bins[center]
        zero_in = zero_bins[center]
        if not full_in or not zero_in:
            if full_in or zero_in:
                logger.warning("bin %.2f: one-sided data (%d full, %d zero); "
                               "reported empty", center, len(full_in), len(zero_in))
            points.append(DecoupledPoint(
                bin_center=center, f_full=float("nan"), f_zero=float("nan"),
                f_prior=float("nan"), ocr_raw=calibration.predict(center),
                k_quality=float("nan"), dataset=dataset, aggregation=aggregation,
                n_full=len(full_in), n_zero=len(zero_in), empty=True,
            ))
            continue
        ocr_center = calibration.predict(center)
        if aggregation == "bin_mean":
            mean_full = _mean_precision(full_in)
            mean_zero = _mean_precision(zero_in)
            prior = f_prior(mean_full, mean_zero)
            ned_prior = _mean_ned(full_in) - _mean_ned(zero_in)
            if ocr_center <= 0:
                logger.warning("bin %.2f: calibration predicts no recognition "
                               "ability; quality undefined", center)
                quality = float("nan")
            else:
                quality = k_quality(mean_full, prior, ocr_center)
            n_full, n_zero = len(full_in), len(zero_in)
        else:
            by_id_full = {r.page_id: r for r in full_in}
            by_id_zero = {r.page_id: r for r in zero_in}
            shared = sorted(set(by_id_full) & set(by_id_zero))
            unpaired = len(full_in) + len(zero_in) - 2 * len(shared)
            if unpaired:
                logger.warning("bin %.2f: %d unpaired samples skipped",
                               center, unpaired)
            if not shared:
                points.append(DecoupledPoint(
                    bin_center=center, f_full=float("nan"), f_zero=float("nan"),
                    f_prior=float("nan"), ocr_raw=ocr_center,
                    k_quality=float("nan"), dataset=dataset,
                    aggregation=aggregation, n_full=0, n_zero=0, empty=True,
                ))
                continue
            fulls = np.array([by_id_full[i].metrics.precision for i in shared])
            zeros = np.array([by_id_zero[i].metrics.precision for i in shared])
            ratios = np.array([by_id_zero[i].ratio for i in shared])
            ocr_i = np.array([calibration.predict(r) for r in ratios])
            mean_full = float(fulls.mean())
            mean_zero = float(zeros.mean())
            prior = float((fulls - zeros).mean())
            ned_prior = float(np.mean(
                [by_id_full[i].metrics.ned_distance
                 - by_id_zero[i].metrics.ned_distance for i in shared]
            ))
            valid = ocr_i > 0
            if not valid.any():
                quality = float("nan")
            else:
                quality = float((zeros[valid] / ocr_i[valid]).mean())
            n_full = n_zero = len(shared)
        points.append(DecoupledPoint(
            bin_center=center,
            f_full=mean_full,
            f_zero=mean_zero,
            f_prior=prior,
            ocr_raw=ocr_center,
            k_quality=quality,
            dataset=dataset,
            aggregation=aggregation,
            n_full=n_full,
            n_zero=n_zero,
            empty=False,
            anomalous=bool(prior < 0 or (quality == quality and quality > 1.0)),
            ned_prior=ned_prior,
        ))
    return points


def save_calibration(calibration: LinearCalibration, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({
            "slope": calibration.slope,
            "intercept": calibration.intercept,
            "fit_residual_max": calibration.fit_residual_max,
            "reference_ids": list(calibration.reference_ids),
        }, fh, indent=2)
        fh.write("\n")


def load_calibration(path: str | Path) -> LinearCalibration:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        return LinearCalibration(
            slope=float(raw["slope"]),
            intercept=float(raw["intercept"]),
            fit_residual_max=float(raw["fit_residual_max"]),
            reference_ids=tuple(raw.get("reference_ids", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise HarnessError(f"bad calibration file {path}: {exc}") from exc


def histogram_counts(values: Sequence[int], bin_width: int) -> tuple[int, list[int]]:
    """Fixed-width histogram aligned to multiples of the bin width.

    Returns the first bin's start and the per-bin counts covering min
    through max value.
    """
    if not values:
        raise ValueError("cannot histogram an empty sequence")
    if bin_width <= 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    start = (min(values) // bin_width) * bin_width
    nbins = (max(values) - start) // bin_width + 1
    counts = [0] * nbins
    for value in values:
        counts[(value - start) // bin_width] += 1
    return int(start), counts


def _fmt(value: float) -> str:
    if value != value:  # NaN: empty cell
        return ""
    return f"{value:.6f}"


def write_decoupled_csv(points: Sequence[DecoupledPoint], path: str | Path) -> None:
    """Per-bin component table; stable, diff-friendly output.

    The precision-channel columns come first; the edit-distance channel
    (``ned_prior``, negative = degradation) is kept in its own column.
    """
    rows = sorted(points, key=lambda p: (p.dataset, p.bin_center))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin", "dataset", "f_full", "f_zero", "f_prior",
                         "ocr_raw", "k_quality", "mode", "n_full", "n_zero",
                         "ned_prior"])
        for p in rows:
            writer.writerow([
                f"{p.bin_center:g}", p.dataset, _fmt(p.f_full), _fmt(p.f_zero),
                _fmt(p.f_prior), _fmt(p.ocr_raw), _fmt(p.k_quality),
                p.aggregation, p.n_full, p.n_zero, _fmt(p.ned_prior),
            ])


def write_strategy_files(score: StrategyScore, csv_path: str | Path,
                         table_path: str | Path) -> None:
    """One-row score summary CSV plus a human-readable per-model table."""
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["strategy_score", "information_preserving"])
        writer.writerow([f"{score.score:.6f}",
                         str(score.is_information_preserving()).lower()])
    lines = ["model            mean_delta", "-" * 28]
    for model in sorted(score.per_model):
        lines.append(f"{model:<16s} {score.per_model[model]:+.6f}")
    lines.append("-" * 28)
    lines.append(f"{'score (max)':<16s} {score.score:+.6f}")
    Path(table_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_comparison_csv(
    baseline: Sequence[EvalRecord],
    perturbed: Sequence[EvalRecord],
    path: str | Path,
    *,
    bins: RatioBins | None = None,
    labels: tuple[str, str] = ("original", "shuffled"),
) -> None:
    """Per-bin mean precision for two record sets plus their difference."""
    if bins is None:
        bins = RatioBins()
    base_bins = bin_records(baseline, bins)
    pert_bins = bin_records(perturbed, bins)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin", labels[0], labels[1], "delta",
                         f"n_{labels[0]}", f"n_{labels[1]}"])
        for center in bins.centers:
            base_in = base_bins[center]
            pert_in = pert_bins[center]
            mean_base = _mean_precision(base_in) if base_in else float("nan")
            mean_pert = _mean_precision(pert_in) if pert_in else float("nan")
            writer.writerow([
                f"{center:g}", _fmt(mean_base), _fmt(mean_pert),
                _fmt(mean_base - mean_pert), len(base_in), len(pert_in),
            ])


def write_histogram_csv(values: Sequence[int], bin_width: int,
                        path: str | Path) -> None:
    start, counts = histogram_counts(values, bin_width)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_start", "count"])
        for i, count in enumerate(counts):
            writer.writerow([start + i * bin_width, count])


def write_report(
    out_dir: str | Path,
    points: Sequence[DecoupledPoint],
    *,
    strategy: StrategyScore | None = None,
    baseline_records: Sequence[EvalRecord] | None = None,
    perturbed_records: Sequence[EvalRecord] | None = None,
    token_counts: Sequence[int] | None = None,
    bins: RatioBins | None = None,
    hist_bin_width: int = 300,
) -> list[Path]:
    """Write the full report bundle; returns the files written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    decoupled_path = out / "decoupled.csv"
    write_decoupled_csv(points, decoupled_path)
    written.append(decoupled_path)
    if strategy is not None:
        csv_path, table_path = out / "strategy_score.csv", out / "strategy_table.txt"
        write_strategy_files(strategy, csv_path, table_path)
        written.extend([csv_path, table_path])
    if baseline_records is not None and perturbed_records is not None:
        comparison_path = out / "comparison.csv"
        write_comparison_csv(baseline_records, perturbed_records,
                             comparison_path, bins=bins)
        written.append(comparison_path)
    if token_counts:
        hist_path = out / "token_histogram.csv"
        write_histogram_csv(token_counts, hist_bin_width, hist_path)
        written.append(hist_path)
    return written
