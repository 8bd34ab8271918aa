import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import numpy as np
import pytest

from zerodoc.core import (
    BBox,
    Corpus,
    Granularity,
    LanguageClass,
    PageAnnotation,
    TextBlock,
    ZerodocError,
)
from zerodoc.harness import (
    DEFAULT_INSTRUCTION,
    EchoClient,
    EvalRecord,
    FileStubClient,
    HarnessError,
    HttpVisionClient,
    RatioBins,
    SweepConfig,
    bin_records,
    decouple,
    histogram_counts,
    load_calibration,
    load_records,
    page_ground_truth,
    run_eval,
    save_calibration,
    save_records,
    write_comparison_csv,
    write_decoupled_csv,
    write_report,
    write_strategy_files,
)
from zerodoc.metrics import LinearCalibration, StringMetricResult, StrategyScore
from zerodoc.renderer import RenderTheta, ResolutionMode, render_corpus


class TestRatioBins:
    def test_defaults(self):
        bins = RatioBins()
        assert bins.centers == (2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 17.5)
        assert bins.half_width == 1.25

    def test_half_open_assignment(self):
        bins = RatioBins()
        assert bins.assign(2.5) == 2.5
        assert bins.assign(1.25) == 2.5
        assert bins.assign(3.75) == 5.0
        assert bins.assign(7.5) == 7.5
        assert bins.assign(1.2) is None
        assert bins.assign(18.75) is None
        assert bins.assign(18.74) == 17.5

    def test_validation(self):
        with pytest.raises(ValueError):
            RatioBins(half_width=0)
        with pytest.raises(ValueError):
            RatioBins(centers=())
        with pytest.raises(ValueError):
            RatioBins(centers=(1.0, 2.0), half_width=1.25)


class TestSweepConfig:
    def test_defaults(self):
        config = SweepConfig()
        assert config.modes == ("base",)
        assert config.seeds == (0,)
        assert config.instruction == DEFAULT_INSTRUCTION

    def test_validation(self):
        with pytest.raises(ValueError):
            SweepConfig(modes=())
        with pytest.raises(ValueError):
            SweepConfig(seeds=())
        with pytest.raises(ValueError):
            SweepConfig(instruction="")


def solved_page(page_id="p0", texts=("hello world", "three more words")):
    blocks = tuple(
        TextBlock(bbox=BBox(20, 20 + 80 * i, 300, 40), text=text,
                  font_size=14, capacity=len(text.split()),
                  language=LanguageClass.LATIN)
        for i, text in enumerate(texts)
    )
    return PageAnnotation(page_id=page_id, image_path=f"{page_id}.png",
                          page_w=400, page_h=300, blocks=blocks,
                          granularity=Granularity.PARAGRAPH)


def rendered_dir(tmp_path, n_pages=3):
    corpus = Corpus(name="mini", pages=tuple(
        solved_page(f"p{i}") for i in range(n_pages)))
    theta = RenderTheta(
        canvas_w=400, canvas_h=300, resolution_mode=ResolutionMode.TINY,
        visual_tokens_per_mode={ResolutionMode.TINY: 64},
    )
    out = tmp_path / "render"
    render_corpus(corpus, theta, out)
    return out, corpus


class TestPageGroundTruth:
    def test_joins_blocks(self):
        assert page_ground_truth(solved_page()) == \
            "hello world\nthree more words"


class TestEchoClient:
    def test_returns_stored_truth(self):
        client = EchoClient({"p0": "the text"})
        assert client.predict("x", Path("none.png"), "p0") == "the text"

    def test_from_corpus(self):
        corpus = Corpus(name="c", pages=(solved_page(),))
        client = EchoClient.from_corpus(corpus, name="echo-test")
        assert client.name == "echo-test"
        assert client.predict("x", Path("n"), "p0").startswith("hello world")

    def test_unknown_page_rejected(self):
        with pytest.raises(HarnessError):
            EchoClient({}).predict("x", Path("n"), "p0")


class TestFileStubClient:
    def test_mapping_source(self):
        client = FileStubClient({"p0": "guess"})
        assert client.predict("x", Path("n"), "p0") == "guess"

    def test_file_source(self, tmp_path):
        path = tmp_path / "preds.jsonl"
        path.write_text('{"id": "p0", "prediction": "a"}\n'
                        '\n{"id": "p1", "prediction": "b"}\n')
        client = FileStubClient(path)
        assert client.predict("x", Path("n"), "p1") == "b"

    def test_bad_record_reports_line(self, tmp_path):
        path = tmp_path / "preds.jsonl"
        path.write_text('{"id": "p0"}\n')
        with pytest.raises(HarnessError, match="preds.jsonl:1"):
            FileStubClient(path)

    def test_unknown_page_rejected(self):
        with pytest.raises(HarnessError):
            FileStubClient({}).predict("x", Path("n"), "p9")


class _VisionHandler(BaseHTTPRequestHandler):
    requests: list[dict] = []
    status_queue: list[int] = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        payload = json.loads(self.rfile.read(length))
        payload["_auth"] = self.headers.get("Authorization")
        type(self).requests.append(payload)
        status = self.status_queue.pop(0) if self.status_queue else 200
        if status != 200:
            self.send_error(status)
            return
        body = json.dumps({"text": "predicted text"}).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture()
def vision_server():
    _VisionHandler.requests = []
    _VisionHandler.status_queue = []
    server = HTTPServer(("127.0.0.1", 0), _VisionHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    thread.join(timeout=5)


@pytest.fixture()
def page_image(tmp_path):
    path = tmp_path / "page.png"
    path.write_bytes(b"not really a png")
    return path


class TestHttpVisionClient:
    def test_posts_payload(self, vision_server, page_image):
        client = HttpVisionClient(vision_server, name="vis")
        text = client.predict("Read it.", page_image, "p7")
        assert text == "predicted text"
        sent = _VisionHandler.requests[-1]
        assert sent["instruction"] == "Read it."
        assert sent["page_id"] == "p7"
        import base64
        assert base64.b64decode(sent["image"]) == b"not really a png"

    def test_retries_transient_failures(self, vision_server, page_image):
        _VisionHandler.status_queue = [500, 500]
        client = HttpVisionClient(vision_server, retries=2, backoff=0.01)
        assert client.predict("x", page_image, "p0") == "predicted text"
        assert len(_VisionHandler.requests) == 3

    def test_gives_up_after_retries(self, vision_server, page_image):
        _VisionHandler.status_queue = [500, 500, 500]
        client = HttpVisionClient(vision_server, retries=2, backoff=0.01)
        with pytest.raises(HarnessError, match="after 3 attempts"):
            client.predict("x", page_image, "p0")

    def test_bearer_token_from_env(self, vision_server, page_image,
                                   monkeypatch):
        monkeypatch.setenv("VIS_TOKEN", "sekrit")
        client = HttpVisionClient(vision_server, auth_token_env="VIS_TOKEN")
        client.predict("x", page_image, "p0")
        assert _VisionHandler.requests[-1]["_auth"] == "Bearer sekrit"

    def test_missing_token_rejected_before_request(self, vision_server,
                                                   page_image, monkeypatch):
        monkeypatch.delenv("VIS_TOKEN", raising=False)
        client = HttpVisionClient(vision_server, auth_token_env="VIS_TOKEN")
        with pytest.raises(HarnessError, match="VIS_TOKEN"):
            client.predict("x", page_image, "p0")
        assert not _VisionHandler.requests


def make_record(page_id, ratio, precision, ned_distance=0.1,
                dataset="original", model="m", error=None):
    metrics = None if error else StringMetricResult(
        precision=precision, ned_similarity=1 - ned_distance,
        ned_distance=ned_distance, gt_len=10, pred_len=10)
    return EvalRecord(
        page_id=page_id, dataset=dataset, model=model, ratio=ratio,
        text_tokens=int(ratio * 64), visual_tokens=64, ground_truth="g",
        prediction="" if error else "p", metrics=metrics, error=error,
    )


class TestEvalRecord:
    def test_roundtrip(self):
        record = make_record("p0", 7.5, 0.9)
        assert EvalRecord.from_json(record.to_json()) == record

    def test_roundtrip_error_record(self):
        record = make_record("p0", 7.5, 0.9, error="boom")
        loaded = EvalRecord.from_json(record.to_json())
        assert loaded.metrics is None
        assert loaded.error == "boom"

    def test_unicode_kept_readable(self):
        record = EvalRecord(
            page_id="p0", dataset="d", model="m", ratio=1.0, text_tokens=1,
            visual_tokens=1, ground_truth="你好", prediction="你好",
            metrics=None)
        assert "你好" in record.to_json()

    def test_save_load_many(self, tmp_path):
        records = [make_record(f"p{i}", 5.0, 0.5) for i in range(4)]
        path = tmp_path / "records.jsonl"
        save_records(records, path)
        assert load_records(path) == records


class CountingEcho(EchoClient):
    def __init__(self, truths, name="echo"):
        super().__init__(truths, name)
        self.calls = 0

    def predict(self, instruction, image_path, page_id=None):
        self.calls += 1
        return super().predict(instruction, image_path, page_id)


class FailOnce(EchoClient):
    def __init__(self, truths, bad_page, name="flaky"):
        super().__init__(truths, name)
        self.bad_page = bad_page

    def predict(self, instruction, image_path, page_id=None):
        if page_id == self.bad_page:
            raise RuntimeError("synthetic outage")
        return super().predict(instruction, image_path, page_id)


class TestRunEval:
    def test_echo_scores_perfect(self, tmp_path):
        render, corpus = rendered_dir(tmp_path)
        client = EchoClient.from_corpus(corpus)
        records = run_eval(render, client)
        assert len(records) == 3
        for record in records:
            assert record.metrics.precision == 1.0
            assert record.metrics.ned_similarity == 1.0
            assert record.ratio == pytest.approx(5 / 64)
            assert record.dataset == "original"
            assert record.model == "echo"
            assert record.error is None

    def test_client_failure_becomes_error_record(self, tmp_path):
        render, corpus = rendered_dir(tmp_path)
        truths = {p.page_id: page_ground_truth(p) for p in corpus.pages}
        client = FailOnce(truths, bad_page="p1")
        records = run_eval(render, client)
        by_id = {r.page_id: r for r in records}
        assert by_id["p1"].error == "synthetic outage"
        assert by_id["p1"].metrics is None
        assert by_id["p0"].metrics.precision == 1.0

    def test_resume_skips_completed_pages(self, tmp_path):
        render, corpus = rendered_dir(tmp_path)
        records_path = tmp_path / "records.jsonl"
        truths = {p.page_id: page_ground_truth(p) for p in corpus.pages}
        first = CountingEcho(truths)
        run_eval(render, first, records_path=records_path)
        assert first.calls == 3
        second = CountingEcho(truths)
        records = run_eval(render, second, records_path=records_path)
        assert second.calls == 0
        assert len(records) == 3
        assert len(load_records(records_path)) == 3

    def test_resume_keyed_by_model_and_dataset(self, tmp_path):
        render, corpus = rendered_dir(tmp_path)
        records_path = tmp_path / "records.jsonl"
        truths = {p.page_id: page_ground_truth(p) for p in corpus.pages}
        run_eval(render, CountingEcho(truths, name="a"),
                 records_path=records_path)
        other_model = CountingEcho(truths, name="b")
        run_eval(render, other_model, records_path=records_path)
        assert other_model.calls == 3
        other_dataset = CountingEcho(truths, name="a")
        records = run_eval(render, other_dataset, dataset="zero",
                           records_path=records_path)
        assert other_dataset.calls == 3
        assert len(records) == 9

    def test_parallel_matches_serial(self, tmp_path):
        render, corpus = rendered_dir(tmp_path)
        client = EchoClient.from_corpus(corpus)
        serial = run_eval(render, client, jobs=1)
        parallel = run_eval(render, client, jobs=3)
        assert serial == parallel

    def test_missing_metadata_rejected(self, tmp_path):
        render, corpus = rendered_dir(tmp_path)
        (render / "render_meta.jsonl").unlink()
        with pytest.raises(ZerodocError):
            run_eval(render, EchoClient.from_corpus(corpus))


class TestBinRecords:
    def test_groups_and_drops(self, caplog):
        records = [
            make_record("a", 2.4, 0.9),
            make_record("b", 2.6, 0.8),
            make_record("c", 7.5, 0.7),
            make_record("d", 40.0, 0.6),
            make_record("e", 5.0, 0.5, error="x"),
        ]
        with caplog.at_level("INFO"):
            grouped = bin_records(records, RatioBins())
        assert [r.page_id for r in grouped[2.5]] == ["a", "b"]
        assert [r.page_id for r in grouped[7.5]] == ["c"]
        assert grouped[5.0] == []
        assert any("dropped 2 of 5" in m for m in caplog.messages)


FLAT_CAL = LinearCalibration(slope=0.0, intercept=0.761, fit_residual_max=0.0)


class TestDecouple:
    def bin75(self, mean_full=0.955, mean_zero=0.717):
        full = [make_record("a", 7.5, mean_full + 0.005, ned_distance=0.05),
                make_record("b", 7.4, mean_full - 0.005, ned_distance=0.05)]
        zero = [make_record("a", 7.5, mean_zero + 0.003, ned_distance=0.30,
                            dataset="zero"),
                make_record("b", 7.4, mean_zero - 0.003, ned_distance=0.30,
                            dataset="zero")]
        return full, zero

    def test_bin_mean_components(self):
        full, zero = self.bin75()
        points = decouple(full, zero, FLAT_CAL, dataset="demo")
        point = next(p for p in points if p.bin_center == 7.5)
        assert not point.empty
        assert point.f_full == pytest.approx(0.955)
        assert point.f_zero == pytest.approx(0.717)
        assert point.f_prior == pytest.approx(0.238)
        assert point.ocr_raw == pytest.approx(0.761)
        assert point.k_quality == pytest.approx(0.9422, abs=1e-3)
        assert point.ned_prior == pytest.approx(0.05 - 0.30)
        assert point.dataset == "demo"
        assert point.n_full == point.n_zero == 2

    def test_decomposition_identity_holds(self):
        full, zero = self.bin75()
        for point in decouple(full, zero, FLAT_CAL):
            if not point.empty:
                assert point.f_full == pytest.approx(
                    point.f_prior + point.ocr_raw * point.k_quality,
                    abs=1e-12)

    def test_unpopulated_bins_marked_empty(self):
        full, zero = self.bin75()
        points = decouple(full, zero, FLAT_CAL)
        assert len(points) == 7
        for point in points:
            if point.bin_center != 7.5:
                assert point.empty
                assert math.isnan(point.f_full)
                assert point.ocr_raw == pytest.approx(0.761)

    def test_one_sided_bin_logged(self, caplog):
        full, _ = self.bin75()
        with caplog.at_level("WARNING"):
            points = decouple(full, [], FLAT_CAL)
        assert all(p.empty for p in points)
        assert any("one-sided" in m for m in caplog.messages)

    def test_negative_prior_flagged_anomalous(self):
        full, zero = self.bin75(mean_full=0.4, mean_zero=0.6)
        point = next(p for p in decouple(full, zero, FLAT_CAL)
                     if p.bin_center == 7.5)
        assert point.f_prior < 0
        assert point.anomalous

    def test_per_sample_aggregation(self, caplog):
        cal = LinearCalibration(slope=-0.01, intercept=0.8,
                                fit_residual_max=0.0)
        full = [make_record("a", 7.0, 0.9, ned_distance=0.1),
                make_record("b", 8.0, 0.8, ned_distance=0.2),
                make_record("c", 7.2, 0.5, ned_distance=0.5)]
        zero = [make_record("a", 7.0, 0.5, ned_distance=0.4, dataset="z"),
                make_record("b", 8.0, 0.3, ned_distance=0.6, dataset="z")]
        with caplog.at_level("WARNING"):
            points = decouple(full, zero, cal, aggregation="per_sample")
        point = next(p for p in points if p.bin_center == 7.5)
        assert point.aggregation == "per_sample"
        assert point.n_full == point.n_zero == 2
        assert point.f_prior == pytest.approx((0.4 + 0.5) / 2)
        expected_quality = (0.5 / cal.predict(7.0) + 0.3 / cal.predict(8.0)) / 2
        assert point.k_quality == pytest.approx(expected_quality)
        assert point.ned_prior == pytest.approx((-0.3 - 0.4) / 2)
        assert any("unpaired" in m for m in caplog.messages)

    def test_bad_aggregation_rejected(self):
        with pytest.raises(ValueError):
            decouple([], [], FLAT_CAL, aggregation="median")


class TestCalibrationIO:
    def test_roundtrip(self, tmp_path):
        cal = LinearCalibration(slope=-0.022, intercept=0.561,
                                fit_residual_max=0.0004,
                                reference_ids=("r1", "r2"))
        path = tmp_path / "calibration.json"
        save_calibration(cal, path)
        assert load_calibration(path) == cal

    def test_bad_file_rejected(self, tmp_path):
        path = tmp_path / "calibration.json"
        path.write_text('{"slope": 1.0}')
        with pytest.raises(HarnessError):
            load_calibration(path)


class TestHistogramCounts:
    def test_known_distribution(self):
        values = [300] * 3 + [900] * 5 + [2100] * 2
        start, counts = histogram_counts(values, 300)
        assert start == 300
        assert counts == [3, 0, 5, 0, 0, 0, 2]

    def test_start_aligned_down(self):
        start, counts = histogram_counts([450, 451], 300)
        assert start == 300
        assert counts == [2]

    def test_validation(self):
        with pytest.raises(ValueError):
            histogram_counts([], 10)
        with pytest.raises(ValueError):
            histogram_counts([1], 0)


def read_csv_lines(path):
    return Path(path).read_text(encoding="utf-8").splitlines()


class TestWriteDecoupledCsv:
    def test_layout_and_formatting(self, tmp_path):
        full = [make_record("a", 7.5, 0.955, ned_distance=0.05)]
        zero = [make_record("a", 7.5, 0.717, ned_distance=0.30,
                            dataset="zero")]
        points = decouple(full, zero, FLAT_CAL, dataset="fox")
        path = tmp_path / "decoupled.csv"
        write_decoupled_csv(points, path)
        lines = read_csv_lines(path)
        assert lines[0] == ("bin,dataset,f_full,f_zero,f_prior,ocr_raw,"
                            "k_quality,mode,n_full,n_zero,ned_prior")
        assert len(lines) == 8
        populated = [l for l in lines if l.startswith("7.5,")][0]
        fields = populated.split(",")
        assert fields[1] == "fox"
        assert fields[2] == "0.955000"
        assert fields[4] == "0.238000"
        assert fields[7] == "bin_mean"
        empty_bin = [l for l in lines if l.startswith("2.5,")][0]
        assert ",,," in empty_bin

    def test_rows_sorted_by_dataset_then_bin(self, tmp_path):
        from zerodoc.metrics import DecoupledPoint
        points = [
            DecoupledPoint(10.0, 0.5, 0.4, 0.1, 0.5, 0.8, dataset="b"),
            DecoupledPoint(2.5, 0.5, 0.4, 0.1, 0.5, 0.8, dataset="b"),
            DecoupledPoint(5.0, 0.5, 0.4, 0.1, 0.5, 0.8, dataset="a"),
        ]
        path = tmp_path / "decoupled.csv"
        write_decoupled_csv(points, path)
        starts = [l.split(",")[:2] for l in read_csv_lines(path)[1:]]
        assert starts == [["5", "a"], ["2.5", "b"], ["10", "b"]]


class TestWriteStrategyFiles:
    def test_outputs(self, tmp_path):
        score = StrategyScore(per_model={"gamma": -0.2, "alpha": -0.05},
                              score=-0.05)
        csv_path = tmp_path / "score.csv"
        table_path = tmp_path / "table.txt"
        write_strategy_files(score, csv_path, table_path)
        lines = read_csv_lines(csv_path)
        assert lines[0] == "strategy_score,information_preserving"
        assert lines[1] == "-0.050000,false"
        table = table_path.read_text()
        assert table.index("alpha") < table.index("gamma")
        assert "-0.050000" in table

    def test_preserving_case(self, tmp_path):
        score = StrategyScore(per_model={"m": 0.002}, score=0.002)
        write_strategy_files(score, tmp_path / "s.csv", tmp_path / "t.txt")
        assert read_csv_lines(tmp_path / "s.csv")[1] == "0.002000,true"


class TestWriteComparisonCsv:
    def test_delta_is_original_minus_shuffled(self, tmp_path):
        baseline = [make_record("a", 7.5, 0.9), make_record("b", 7.5, 0.9)]
        shuffled = [make_record("a-shuf0", 7.5, 0.8),
                    make_record("b-shuf0", 7.5, 0.8)]
        path = tmp_path / "comparison.csv"
        write_comparison_csv(baseline, shuffled, path)
        lines = read_csv_lines(path)
        assert lines[0] == "bin,original,shuffled,delta,n_original,n_shuffled"
        row = [l for l in lines if l.startswith("7.5,")][0]
        assert row == "7.5,0.900000,0.800000,0.100000,2,2"

    def test_empty_bins_blank(self, tmp_path):
        path = tmp_path / "comparison.csv"
        write_comparison_csv([], [], path)
        for line in read_csv_lines(path)[1:]:
            fields = line.split(",")
            assert fields[1] == fields[2] == fields[3] == ""
            assert fields[4] == fields[5] == "0"

    def test_custom_labels(self, tmp_path):
        path = tmp_path / "comparison.csv"
        write_comparison_csv([], [], path, labels=("plain", "moved"))
        assert read_csv_lines(path)[0] == \
            "bin,plain,moved,delta,n_plain,n_moved"


class TestWriteReport:
    def test_full_bundle(self, tmp_path):
        full = [make_record("a", 7.5, 0.955)]
        zero = [make_record("a", 7.5, 0.717, dataset="zero")]
        points = decouple(full, zero, FLAT_CAL)
        strategy = StrategyScore(per_model={"m": -0.02}, score=-0.02)
        written = write_report(
            tmp_path / "report", points, strategy=strategy,
            baseline_records=full, perturbed_records=zero,
            token_counts=[300, 900, 900],
        )
        names = [p.name for p in written]
        assert names == ["decoupled.csv", "strategy_score.csv",
                         "strategy_table.txt", "comparison.csv",
                         "token_histogram.csv"]
        for path in written:
            assert path.is_file()

    def test_minimal_bundle(self, tmp_path):
        written = write_report(tmp_path / "report", [])
        assert [p.name for p in written] == ["decoupled.csv"]
