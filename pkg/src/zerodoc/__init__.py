"""Benchmark construction and evaluation toolkit for visual-text compression.

The pipeline: analyze source layouts into generation parameters, sample
semantics-free replacement text from the low-probability tail of a reference
model, render replacement pages at controlled compression ratios, optionally
perturb word order on real pages, evaluate vision models on the results, and
decouple the measured accuracy into semantic-prior and raw-recognition
components.
"""

from .core import (
    BBox,
    Corpus,
    Granularity,
    LanguageClass,
    ManifestError,
    PageAnnotation,
    SourceStyle,
    TextBlock,
    ValidationError,
    ZerodocError,
    detect_language,
    load_corpus,
    save_corpus,
    text_capacity,
)
from .fonts import FontMetricsModel, MonospaceMetrics, TrueTypeMetrics, default_metrics
from .harness import (
    EchoClient,
    EvalRecord,
    FileStubClient,
    HttpVisionClient,
    ModelClient,
    RatioBins,
    SweepConfig,
    decouple,
    run_eval,
    write_report,
)
from .layout import (
    LayoutError,
    LayoutParams,
    extract_theta,
    reconstruct_paragraphs,
    solve_font_size,
)
from .metrics import (
    DecoupledPoint,
    LinearCalibration,
    StringMetricResult,
    StrategyScore,
    char_precision,
    evaluate_strings,
    f_prior,
    fit_ocr_raw,
    k_quality,
    levenshtein,
    ned,
    strategy_score,
)
from .perturb import (
    LineGroup,
    build_shuffled_set,
    extract_lines,
    group_lines,
    permute_lines,
    shuffle_words_in_line,
)
from .renderer import (
    Background,
    RenderTheta,
    RenderedPage,
    ResolutionMode,
    compression_ratio,
    inpaint_regions,
    pad_to_canvas,
    render_corpus,
    render_page,
    typeset_block,
)
from .zerotext import (
    GenSpec,
    NGramOracle,
    ProbabilityOracle,
    RemoteOracle,
    VacuumAudit,
    ValidVocab,
    ZeroTextResult,
    audit_vacuum,
    build_valid_vocab,
    generate_zero_text,
    tokens_to_block_text,
)

__version__ = "0.1.0"
