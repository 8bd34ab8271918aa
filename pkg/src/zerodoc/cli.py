"""Command-line interface.

Subcommands cover the whole pipeline: layout analysis, semantics-free text
generation, page rendering, word-order perturbation, model evaluation, raw
recognition calibration, accuracy decoupling, report writing, and the
posterior audit. Global flags (--config/--seed/--out/--jobs) sit before the
subcommand; an INI config file can supply defaults for any of them plus
per-stage settings.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import core, fonts, harness, layout, metrics, perturb, renderer, zerotext
from .core import ZerodocError

logger = logging.getLogger(__name__)

THETA_MANIFEST = "annotations.theta.jsonl"
REPLACEMENTS_NAME = "replacements.jsonl"


def _load_config(path: Path | None) -> configparser.ConfigParser:
    config = configparser.ConfigParser()
    if path is not None:
        if not path.is_file():
            raise ZerodocError(f"config file not found: {path}")
        config.read(path)
    return config


def _setting(config: configparser.ConfigParser, section: str, key: str,
             override, fallback):
    """Flag value if given, else config value, else fallback."""
    if override is not None:
        return override
    if config.has_option(section, key):
        return config.get(section, key)
    return fallback


def _resolve_seed(args, config) -> int:
    if args.seed is not None:
        return args.seed
    if config.has_option("defaults", "seed"):
        return config.getint("defaults", "seed")
    return 0


def _resolve_jobs(args, config) -> int:
    if args.jobs is not None:
        return args.jobs
    if config.has_option("defaults", "jobs"):
        return config.getint("defaults", "jobs")
    return 1


def _resolve_out(args, default: Path) -> Path:
    return args.out if args.out is not None else default


def _metrics_from(config, font_flag: str | None) -> fonts.TrueTypeMetrics:
    font = _setting(config, "render", "font", font_flag, None)
    factor = float(_setting(config, "render", "line_height_factor", None, 1.2))
    if font is None:
        return fonts.TrueTypeMetrics(line_height_factor=factor)
    return fonts.TrueTypeMetrics(font, line_height_factor=factor)


def _theta_from(args, config) -> renderer.RenderTheta:
    mode = renderer.ResolutionMode(
        _setting(config, "render", "mode", getattr(args, "mode", None), "base"))
    background = renderer.Background(
        _setting(config, "render", "background",
                 getattr(args, "background", None), "blank"))
    canvas_w = int(_setting(config, "render", "canvas_w",
                            getattr(args, "canvas_w", None), renderer.DEFAULT_CANVAS))
    canvas_h = int(_setting(config, "render", "canvas_h",
                            getattr(args, "canvas_h", None), renderer.DEFAULT_CANVAS))
    font = _setting(config, "render", "font", getattr(args, "font", None), None)
    factor = float(_setting(config, "render", "line_height_factor", None, 1.2))
    tokens = dict(renderer.DEFAULT_VISUAL_TOKENS)
    for res_mode in renderer.ResolutionMode:
        key = f"tokens_{res_mode.value}"
        if config.has_option("render", key):
            tokens[res_mode] = config.getint("render", key)
    override = getattr(args, "visual_tokens", None)
    if override is not None:
        tokens[mode] = override
    return renderer.RenderTheta(
        canvas_w=canvas_w,
        canvas_h=canvas_h,
        resolution_mode=mode,
        visual_tokens_per_mode=tokens,
        font_face=font,
        line_height_factor=factor,
        background=background,
    )


def _build_client(spec: str, model_name: str | None, config) -> harness.ModelClient:
    """Client from a spec string: echo, file:PATH, or http:URL."""
    if spec == "echo":
        raise ZerodocError("echo client is built per corpus; use cmd_evaluate")
    if spec.startswith("file:"):
        return harness.FileStubClient(spec[5:], name=model_name or "file-stub")
    if spec.startswith("http:") or spec.startswith("https:"):
        timeout = float(_setting(config, "evaluate", "timeout", None, 60.0))
        retries = int(_setting(config, "evaluate", "retries", None, 2))
        auth_env = _setting(config, "evaluate", "auth_token_env", None, None)
        return harness.HttpVisionClient(
            spec, name=model_name or "http", timeout=timeout,
            retries=retries, auth_token_env=auth_env,
        )
    raise ZerodocError(f"unknown client spec {spec!r}; use echo, file:PATH, or http(s)://URL")


def cmd_analyze(args, config) -> int:
    corpus = core.load_corpus(args.corpus, require_images=False)
    model = _metrics_from(config, args.font)
    threshold = args.ascii_threshold
    if threshold is None and config.has_option("layout", "ascii_threshold"):
        threshold = config.getfloat("layout", "ascii_threshold")
    pages = []
    for page in corpus.pages:
        pages.append(layout.extract_theta(page, model, ascii_threshold=threshold))
    out_corpus = core.Corpus(name=corpus.name, pages=tuple(pages),
                             source_style=corpus.source_style, root=corpus.root)
    out_dir = _resolve_out(args, Path(args.corpus))
    manifest = core.save_corpus(out_corpus, out_dir, manifest_name=args.theta_manifest)
    total = sum(len(p.blocks) for p in pages)
    logger.info("analyzed %d pages (%d regions) -> %s", len(pages), total, manifest)
    return 0


def _build_oracle(args, config) -> zerotext.NGramOracle:
    train_path = Path(args.train_text)
    if not train_path.is_file():
        raise ZerodocError(f"training text not found: {train_path}")
    order = int(_setting(config, "generate", "order", args.order, 3))
    interpolation = float(_setting(config, "generate", "interpolation",
                                   getattr(args, "interpolation", None), 0.9))
    mode = _setting(config, "generate", "oracle_mode",
                    getattr(args, "oracle_mode", None), "word")
    text = train_path.read_text(encoding="utf-8")
    return zerotext.NGramOracle.train(text, order=order,
                                      interpolation=interpolation, mode=mode)


def cmd_generate(args, config) -> int:
    seed = _resolve_seed(args, config)
    corpus = core.load_corpus(args.corpus, manifest_name=args.theta_manifest,
                              require_images=False)
    oracle = _build_oracle(args, config)
    tau_init = float(_setting(config, "generate", "tau_init", args.tau_init,
                              zerotext.DEFAULT_TAU_INIT))
    max_relax = int(_setting(config, "generate", "max_relaxations",
                             args.max_relaxations, zerotext.DEFAULT_MAX_RELAXATIONS))
    valid_cache: dict[core.LanguageClass, zerotext.ValidVocab] = {}
    table: dict[str, renderer.PageReplacement] = {}
    worst_tau = 0.0
    for page in corpus.pages:
        page_rng = np.random.default_rng(core.stable_seed(seed, page.page_id))
        page_seed = int(page_rng.integers(2 ** 63))
        block_rng = np.random.default_rng(core.stable_seed(page_seed))
        texts: list[str] = []
        for block in page.blocks:
            if block.capacity is None or block.language is None:
                raise ZerodocError(
                    f"page {page.page_id}: block missing capacity/language; "
                    f"run analyze first"
                )
            language = block.language
            if language not in valid_cache:
                valid_cache[language] = zerotext.build_valid_vocab(oracle, language)
            if block.capacity == 0:
                texts.append("")
                continue
            spec = zerotext.GenSpec(
                target_capacity=block.capacity,
                seed=int(block_rng.integers(2 ** 63)),
                tau_init=tau_init,
                max_relaxations=max_relax,
            )
            result = zerotext.generate_zero_text(spec, oracle, valid_cache[language])
            worst_tau = max(worst_tau, result.max_tau)
            if result.fallback_steps:
                logger.warning("page %s: %d fallback draws", page.page_id,
                               len(result.fallback_steps))
            texts.append(result.text(language))
        table[page.page_id] = renderer.PageReplacement(texts=tuple(texts),
                                                       seed=page_seed)
    out_dir = _resolve_out(args, Path(args.corpus))
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / REPLACEMENTS_NAME
    renderer.save_replacements(table, out_path)
    logger.info("generated replacements for %d pages (max tau %.2e) -> %s",
                len(table), worst_tau, out_path)
    return 0


def cmd_render(args, config) -> int:
    theta = _theta_from(args, config)
    need_images = theta.background is renderer.Background.INPAINTED_SOURCE
    corpus = core.load_corpus(args.corpus, manifest_name=args.theta_manifest,
                              require_images=need_images)
    replacements = None
    if not args.original:
        rep_path = Path(args.replacements) if args.replacements \
            else Path(args.corpus) / REPLACEMENTS_NAME
        if not rep_path.is_file():
            raise ZerodocError(
                f"replacements file not found: {rep_path} "
                f"(run generate, or pass --original)"
            )
        replacements = renderer.load_replacements(rep_path)
    if args.out is None:
        raise ZerodocError("render needs --out DIRECTORY")
    counter = None
    if args.token_vocab is not None:
        counter = renderer.load_token_counter(args.token_vocab)
    rendered = renderer.render_corpus(corpus, theta, args.out,
                                      replacements=replacements,
                                      token_counter=counter)
    logger.info("rendered %d pages (%s, %d visual tokens) -> %s",
                len(rendered), theta.resolution_mode.value,
                theta.visual_tokens, args.out)
    return 0


def cmd_perturb(args, config) -> int:
    seed = _resolve_seed(args, config)
    corpus = core.load_corpus(args.corpus)
    if args.out is None:
        raise ZerodocError("perturb needs --out DIRECTORY")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = renderer.ResolutionMode(
        _setting(config, "render", "mode", args.mode, "base"))
    visual_tokens = renderer.DEFAULT_VISUAL_TOKENS[mode]
    new_pages = []
    meta_records = []
    for page in corpus.pages:
        image = np.asarray(Image.open(corpus.image_file(page)).convert("RGB"))
        variants = perturb.build_shuffled_set(
            page, image, args.permutations, seed, tolerance=args.tolerance)
        for canvas, annotation in variants:
            Image.fromarray(canvas).save(out_dir / annotation.image_path,
                                         format="PNG")
            new_pages.append(annotation)
            text_tokens = sum(
                core.text_capacity(b.text, core.detect_language(b.text))
                for b in annotation.blocks if b.text.strip()
            )
            meta_records.append({
                "id": annotation.page_id,
                "mode": mode.value,
                "visual_tokens": visual_tokens,
                "text_tokens": text_tokens,
                "seed": seed,
                "theta_hash": "",
            })
    out_corpus = core.Corpus(name=f"{corpus.name}-shuffled",
                             pages=tuple(new_pages),
                             source_style=corpus.source_style, root=out_dir)
    core.save_corpus(out_corpus, out_dir)
    with open(out_dir / renderer.RENDER_META_NAME, "w", encoding="utf-8") as fh:
        for record in meta_records:
            fh.write(json.dumps(record, ensure_ascii=False))
            fh.write("\n")
    logger.info("perturbed %d pages x%d -> %s (%d variants)",
                len(corpus), args.permutations, out_dir, len(new_pages))
    return 0


def cmd_evaluate(args, config) -> int:
    jobs = _resolve_jobs(args, config)
    sweep = _sweep_from(config, _setting(config, "evaluate", "instruction",
                                         args.instruction, None))
    instruction = sweep.instruction
    if args.client == "echo":
        corpus = core.load_corpus(args.render_dir)
        client: harness.ModelClient = harness.EchoClient.from_corpus(
            corpus, name=args.model_name or "echo")
    else:
        client = _build_client(args.client, args.model_name, config)
    if args.out is None:
        out_path = Path(args.render_dir) / "records.jsonl"
    elif args.out.suffix == ".jsonl":
        out_path = args.out
    else:
        out_path = args.out / "records.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    records = harness.run_eval(
        args.render_dir, client,
        dataset=args.dataset, instruction=instruction, jobs=jobs,
        records_path=out_path,
    )
    scored = [r for r in records if r.metrics is not None]
    failed = len(records) - len(scored)
    mean_precision = float(np.mean([r.metrics.precision for r in scored])) \
        if scored else float("nan")
    logger.info("evaluated %d pages (%d failed): mean precision %.4f -> %s",
                len(records), failed, mean_precision, out_path)
    return 0


def cmd_calibrate(args, config) -> int:
    points: list[tuple[float, float]] = []
    reference_ids: list[str] = []
    if args.points is not None:
        with open(args.points, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            for row in reader:
                if not row or row[0].strip().lower() in ("ratio", "#"):
                    continue
                points.append((float(row[0]), float(row[1])))
    elif args.records is not None:
        for record in harness.load_records(args.records):
            if record.metrics is not None:
                points.append((record.ratio, record.metrics.precision))
                reference_ids.append(record.page_id)
    else:
        raise ZerodocError("calibrate needs --points CSV or --records JSONL")
    calibration = metrics.fit_ocr_raw(points, reference_ids)
    out_dir = _resolve_out(args, Path("."))
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "calibration.json"
    harness.save_calibration(calibration, out_path)
    logger.info("fitted ocr_raw(ratio) = %.6f * ratio + %.6f "
                "(max residual %.6f) -> %s",
                calibration.slope, calibration.intercept,
                calibration.fit_residual_max, out_path)
    return 0


def _sweep_from(config, instruction: str | None = None) -> harness.SweepConfig:
    """Sweep settings from the [evaluate] config section, if present."""
    bins = harness.RatioBins()
    if config.has_option("evaluate", "bin_centers"):
        centers = tuple(float(v) for v in
                        config.get("evaluate", "bin_centers").split(","))
        half = config.getfloat("evaluate", "bin_half_width",
                               fallback=harness.DEFAULT_BIN_HALF_WIDTH)
        bins = harness.RatioBins(centers=centers, half_width=half)
    return harness.SweepConfig(
        bins=bins,
        instruction=instruction or harness.DEFAULT_INSTRUCTION,
    )


def cmd_decouple(args, config) -> int:
    full = harness.load_records(args.full)
    zero = harness.load_records(args.zero)
    calibration = harness.load_calibration(args.calibration)
    points = harness.decouple(full, zero, calibration,
                              bins=_sweep_from(config).bins,
                              aggregation=args.aggregation,
                              dataset=args.dataset)
    out_dir = _resolve_out(args, Path("."))
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "decoupled.csv"
    harness.write_decoupled_csv(points, out_path)
    logger.info("decoupled %d bins -> %s", len(points), out_path)
    return 0


def cmd_report(args, config) -> int:
    full = harness.load_records(args.full)
    zero = harness.load_records(args.zero)
    calibration = harness.load_calibration(args.calibration)
    bins = _sweep_from(config).bins
    points = harness.decouple(full, zero, calibration, bins=bins,
                              aggregation=args.aggregation,
                              dataset=args.dataset)
    strategy = None
    if args.strategy_deltas is not None:
        with open(args.strategy_deltas, encoding="utf-8") as fh:
            strategy = metrics.strategy_score(json.load(fh))
    perturbed = harness.load_records(args.shuffled) if args.shuffled else None
    token_counts = None
    if args.render_dir is not None:
        meta = renderer.load_render_meta(args.render_dir)
        token_counts = [int(m["text_tokens"]) for m in meta.values()]
    out_dir = _resolve_out(args, Path("."))
    written = harness.write_report(
        out_dir, points,
        strategy=strategy,
        baseline_records=full if perturbed is not None else None,
        perturbed_records=perturbed,
        token_counts=token_counts,
        bins=bins,
        hist_bin_width=args.hist_bin_width,
    )
    for path in written:
        logger.info("wrote %s", path)
    return 0


def cmd_audit(args, config) -> int:
    oracle = _build_oracle(args, config)
    table = renderer.load_replacements(args.replacements)
    ceiling = args.tau_ceiling
    results: dict[str, dict] = {}
    violations = 0
    for page_id in sorted(table):
        tokens: list[str] = []
        for text in table[page_id].texts:
            tokens.extend(oracle.tokenize(text))
        if not tokens:
            continue
        audit = zerotext.audit_vacuum(tokens, oracle)
        below = audit.fraction_below(ceiling)
        results[page_id] = {
            "max_posterior": audit.max_posterior,
            "fraction_below_ceiling": below,
            "positions": len(audit.posteriors),
        }
        if audit.max_posterior >= ceiling:
            violations += 1
            logger.warning("page %s: max posterior %.3e >= ceiling %.1e",
                           page_id, audit.max_posterior, ceiling)
    out_dir = _resolve_out(args, Path(args.replacements).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "audit.json"
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump({"tau_ceiling": ceiling, "pages": results}, fh, indent=2)
        fh.write("\n")
    worst = max((r["max_posterior"] for r in results.values()), default=0.0)
    logger.info("audited %d pages: worst posterior %.3e, %d above ceiling -> %s",
                len(results), worst, violations, out_path)
    if violations and args.fail_on_ceiling:
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zerodoc",
        description="Benchmark construction and evaluation for visual-text "
                    "compression of document images.",
    )
    parser.add_argument("--config", type=Path, default=None,
                        help="INI config file supplying defaults")
    parser.add_argument("--seed", type=int, default=None,
                        help="base random seed (default 0)")
    parser.add_argument("--out", type=Path, default=None,
                        help="output directory (command-specific default)")
    parser.add_argument("--jobs", type=int, default=None,
                        help="parallel workers for evaluation (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="reconstruct layout and solve fonts")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--font", type=str, default=None,
                   help="TrueType font for width simulation")
    p.add_argument("--ascii-threshold", type=float, default=None)
    p.add_argument("--theta-manifest", type=str, default=THETA_MANIFEST)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("generate", help="sample semantics-free replacement text")
    p.add_argument("--corpus", type=Path, required=True,
                   help="corpus dir with an analyzed manifest")
    p.add_argument("--theta-manifest", type=str, default=THETA_MANIFEST)
    p.add_argument("--train-text", type=Path, required=True,
                   help="plain text file to fit the reference model on")
    p.add_argument("--order", type=int, default=None)
    p.add_argument("--interpolation", type=float, default=None)
    p.add_argument("--oracle-mode", choices=("word", "char"), default=None)
    p.add_argument("--tau-init", type=float, default=None)
    p.add_argument("--max-relaxations", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("render", help="compose page images")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--theta-manifest", type=str, default=THETA_MANIFEST)
    p.add_argument("--replacements", type=Path, default=None)
    p.add_argument("--original", action="store_true",
                   help="re-typeset original texts instead of replacements")
    p.add_argument("--mode", choices=[m.value for m in renderer.ResolutionMode],
                   default=None)
    p.add_argument("--background",
                   choices=[b.value for b in renderer.Background], default=None)
    p.add_argument("--canvas-w", type=int, default=None)
    p.add_argument("--canvas-h", type=int, default=None)
    p.add_argument("--visual-tokens", type=int, default=None,
                   help="override the assumed visual tokens for --mode")
    p.add_argument("--font", type=str, default=None)
    p.add_argument("--token-vocab", type=Path, default=None,
                   help="count text tokens with this subword vocabulary "
                        "instead of block capacities")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("perturb", help="build shuffled variants of word-level pages")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--permutations", type=int, default=5)
    p.add_argument("--tolerance", type=float,
                   default=perturb.DEFAULT_HEIGHT_TOLERANCE)
    p.add_argument("--mode", choices=[m.value for m in renderer.ResolutionMode],
                   default=None, help="assumed encoder mode for token accounting")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("evaluate", help="transcribe rendered pages with a model")
    p.add_argument("--render-dir", type=Path, required=True)
    p.add_argument("--client", type=str, required=True,
                   help="echo, file:PREDICTIONS.jsonl, or http(s)://endpoint")
    p.add_argument("--dataset", type=str, default="original",
                   help="dataset tag stored in records (original/zero/shuffled)")
    p.add_argument("--instruction", type=str, default=None)
    p.add_argument("--model-name", type=str, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("calibrate", help="fit the raw recognition line")
    p.add_argument("--points", type=Path, default=None,
                   help="CSV of ratio,accuracy rows")
    p.add_argument("--records", type=Path, default=None,
                   help="records JSONL from a raw recognition run")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("decouple", help="split accuracy into components")
    p.add_argument("--full", type=Path, required=True)
    p.add_argument("--zero", type=Path, required=True)
    p.add_argument("--calibration", type=Path, required=True)
    p.add_argument("--aggregation", choices=harness.AGGREGATION_MODES,
                   default="bin_mean")
    p.add_argument("--dataset", type=str, default="")
    p.set_defaults(func=cmd_decouple)

    p = sub.add_parser("report", help="write the full report bundle")
    p.add_argument("--full", type=Path, required=True)
    p.add_argument("--zero", type=Path, required=True)
    p.add_argument("--calibration", type=Path, required=True)
    p.add_argument("--shuffled", type=Path, default=None)
    p.add_argument("--strategy-deltas", type=Path, default=None,
                   help="JSON mapping model name to a list of accuracy deltas")
    p.add_argument("--render-dir", type=Path, default=None,
                   help="rendered corpus whose token counts feed the histogram")
    p.add_argument("--aggregation", choices=harness.AGGREGATION_MODES,
                   default="bin_mean")
    p.add_argument("--dataset", type=str, default="")
    p.add_argument("--hist-bin-width", type=int, default=300)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("audit", help="replay generated text through the oracle")
    p.add_argument("--replacements", type=Path, required=True)
    p.add_argument("--train-text", type=Path, required=True)
    p.add_argument("--order", type=int, default=None)
    p.add_argument("--interpolation", type=float, default=None)
    p.add_argument("--oracle-mode", choices=("word", "char"), default=None)
    p.add_argument("--tau-ceiling", type=float, default=1e-5)
    p.add_argument("--fail-on-ceiling", action="store_true")
    p.set_defaults(func=cmd_audit)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except ZerodocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
