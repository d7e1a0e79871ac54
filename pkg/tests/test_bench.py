import csv
import json
import statistics
import subprocess
import sys
import time
from collections import Counter

import psutil
import pytest

from spindle.bench.cli import main
from spindle.bench.config import BenchConfig, ConfigError
from spindle.bench.report import CSV_COLUMNS, emit_report, load_report, render
from spindle.bench.runner import (
    BenchReport,
    ResourceSampler,
    WorkloadPlan,
    run_baseline_sequential,
    run_benchmark,
    split_items,
)
from spindle.bench.workloads import ImageWorkload, pack_resize_request, decode_resize_remote


def multiset(outs):
    return Counter(x for out in outs for x in split_items(out))


def image_config(corpus, **kw):
    base = dict(
        workload="image",
        corpus=str(corpus.path),
        concurrency_list=[2],
        batch_size=8,
        sample_count=len(corpus.entries),
        resize_width=24,
        resize_height=16,
        repetitions=1,
    )
    base.update(kw)
    return BenchConfig(**base)


# -- config ----------------------------------------------------------------------------


def test_config_from_text():
    cfg = BenchConfig.from_text(
        """
        # sweep
        workload = sleep
        concurrency_list = 1, 2 ,4
        executor = shared_pool, subprocess_pool   # both backends
        sleep_ms = 2.5
        worker_count = none
        fetch_rate_limit = 30
        sample_count = 64
        """
    )
    assert cfg.concurrency_list == [1, 2, 4]
    assert cfg.executor == ["shared_pool", "subprocess_pool"]
    assert cfg.sleep_ms == 2.5 and cfg.worker_count is None and cfg.fetch_rate_limit == 30.0
    assert BenchConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize(
    "text, match",
    [
        ("sample_count = 4\nbatch_size = 8", "sample_count"),
        ("repetitions = 0", "repetitions"),
        ("workload = video", "workload"),
        ("workload = image", "corpus"),
        ("colour = blue", "unknown key"),
        ("batch_size", "key = value"),
        ("batch_size = many", "bad value"),
        ("executor = gpu", "executor"),
        ("ordering = random", "ordering"),
        ("concurrency_list = 0", "concurrency_list"),
    ],
)
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        BenchConfig.from_text(text)


def test_items_capped_by_source_size():
    assert BenchConfig(sample_count=100, batch_size=10, source_size=40).items == 40
    assert BenchConfig(sample_count=100, batch_size=10, source_size=10**6).items == 100


# -- runs -------------------------------------------------------------------------------


def test_sleep_sweep_scales_with_concurrency():
    cfg = BenchConfig(workload="sleep", sleep_ms=10, concurrency_list=[1, 2, 4], sample_count=200, batch_size=10, repetitions=1)
    report = run_benchmark(cfg)
    t = {r.concurrency: r.throughput for r in report.rows}
    # perfect overlap predicts 1:2:4
    assert t[2] / t[1] == pytest.approx(2, rel=0.3)
    assert t[4] / t[1] == pytest.approx(4, rel=0.3)
    for r in report.rows:
        assert r.items == 200 and r.batches == 20
        assert r.throughput == pytest.approx(r.items / (r.wall_us / 1e6), rel=1e-9)
        assert r.stats["items_emitted"] == 200


def test_sequential_sleep_wall_time():
    cfg = BenchConfig(workload="sleep", sleep_ms=10, sample_count=100, batch_size=10, repetitions=1)
    seq = [r for r in run_baseline_sequential(cfg).rows if r.executor == "sequential"]
    assert seq[0].wall_us / 1e6 == pytest.approx(1.0, rel=0.1)


def test_passthrough_overhead_budget():
    cfg = BenchConfig(workload="sleep", sleep_ms=0, sample_count=5000, batch_size=10, repetitions=3)
    rows = [r for r in run_baseline_sequential(cfg).rows if r.executor == "passthrough"]
    median = statistics.median(r.per_item_us for r in rows)
    assert median <= 200, [r.per_item_us for r in rows]


def test_sequential_and_pipeline_outputs_match(small_corpus):
    cfg = image_config(small_corpus, executor=["shared_pool", "dedicated_pool"], concurrency_list=[1, 3])
    runs = {}
    run_benchmark(cfg, collect=runs)
    base = {}
    run_baseline_sequential(cfg, collect=base)
    expected = multiset(base[("sequential", 1, 0)])
    assert sum(expected.values()) == len(small_corpus.entries)
    for key, outs in runs.items():
        assert multiset(outs) == expected, key


def test_batches_reuse_host_buffers(small_corpus):
    cfg = image_config(small_corpus, sink_capacity=3)
    plan = WorkloadPlan(cfg)
    p = plan.build(2)
    with p.auto_stop():
        outs = list(p)
    n = len(small_corpus.entries)
    assert sum(o.shape[0] for o in outs) == n
    # one copy per frame into the batch buffer
    assert plan.image.copies == n
    pool = plan.image.pool(cfg.batch_size)
    assert pool.high_water <= cfg.sink_capacity + 1
    assert plan.image.engine.max_in_flight == 1


def test_remote_decode_matches_local(small_corpus):
    img = ImageWorkload(small_corpus, 24, 16)
    data = img.load(small_corpus.entries[0])
    assert decode_resize_remote(pack_resize_request(data, 24, 16)) == img.decode_resize(data).tobytes()


def test_fetch_workload_counts_failures(small_corpus):
    cfg = image_config(
        small_corpus,
        workload="fetch_image",
        fetch_latency_ms=5,
        fetch_failure_rate=0.25,
        concurrency_list=[8],
        seed=1,
    )
    row = run_benchmark(cfg).rows[0]
    plan = WorkloadPlan(cfg)
    injected = sum(plan.image.client.profile.outcome(i)[1] for i in range(len(small_corpus.entries)))
    assert injected > 0
    assert row.failed == injected
    assert row.items == len(small_corpus.entries) - injected


def test_subprocess_ttfb_is_flagged():
    cfg = BenchConfig(
        workload="sleep",
        sleep_ms=1,
        concurrency_list=[2],
        sample_count=20,
        batch_size=5,
        repetitions=1,
        executor=["shared_pool", "subprocess_pool"],
    )
    report = run_benchmark(cfg)
    (delta,) = report.ttfb_deltas()
    assert delta["flagged"] and delta["delta_us"] > 0


def test_summary_statistics():
    cfg = BenchConfig(workload="sleep", sleep_ms=1, concurrency_list=[1], sample_count=20, batch_size=5, repetitions=3)
    report = run_benchmark(cfg)
    (s,) = report.summary()
    tputs = sorted(r.throughput for r in report.rows)
    assert s["repetitions"] == 3
    assert (s["throughput_min"], s["throughput_median"], s["throughput_max"]) == tuple(tputs)


def test_resource_sampler():
    with ResourceSampler(interval=0.1) as s:
        blob = bytearray(50 * 2**20)
        time.sleep(0.35)
    del blob
    assert s.samples >= 4
    assert s.peak_rss >= psutil.Process().memory_info().rss // 2


def test_rows_report_cpu_time():
    cfg = BenchConfig(workload="sleep", sleep_ms=0, concurrency_list=[1], sample_count=2000, batch_size=10, repetitions=1)
    row = run_benchmark(cfg).rows[0]
    assert row.cpu_user_s + row.cpu_system_s > 0
    assert row.peak_rss_bytes > 0


# -- reports -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def three_rows():
    cfg = BenchConfig(workload="sleep", sleep_ms=1, concurrency_list=[2, 1], sample_count=10, batch_size=5, repetitions=1)
    report = run_benchmark(cfg)
    extra = run_benchmark(BenchConfig(workload="sleep", sleep_ms=1, concurrency_list=[3], sample_count=10, batch_size=5, repetitions=1))
    return BenchReport(report.rows + extra.rows)


def test_csv_report(tmp_path, three_rows):
    path = emit_report(three_rows, "csv", tmp_path / "r.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert lines[0].split(",") == CSV_COLUMNS
    rows = list(csv.DictReader(lines))
    assert [int(r["concurrency"]) for r in rows] == [1, 2, 3]


def test_json_report(tmp_path, three_rows):
    path = emit_report(three_rows, "json", tmp_path / "r.json")
    data = json.loads(path.read_text())
    assert isinstance(data, list) and len(data) == 3
    for row in data:
        assert set(CSV_COLUMNS) <= set(row)
        assert {"source_pulled", "sink_emitted", "stages", "ttfb_us", "wall_time_us"} <= set(row["stats"])
    assert load_report(path).sorted_rows() == three_rows.sorted_rows()


def test_reports_are_byte_identical(tmp_path, three_rows):
    for fmt in ("csv", "json"):
        a = emit_report(three_rows, fmt, tmp_path / f"a.{fmt}").read_bytes()
        b = emit_report(BenchReport(list(reversed(three_rows.rows))), fmt, tmp_path / f"b.{fmt}").read_bytes()
        assert a == b


def test_unwritable_report_path(tmp_path, three_rows):
    with pytest.raises(OSError):
        emit_report(three_rows, "csv", tmp_path / "missing" / "dir" / "r.csv")
    with pytest.raises(ValueError):
        render(three_rows, "xml")


# -- command line ------------------------------------------------------------------------


def test_cli_corpus_run_and_report(tmp_path, capsys):
    assert main(["corpus", "--n", "12", "--width", "20", "--height", "10", "--seed", "4", "--out", str(tmp_path / "c")]) == 0
    conf = tmp_path / "b.conf"
    conf.write_text(
        f"workload = image\ncorpus = {tmp_path / 'c'}\nconcurrency_list = 1, 2\n"
        "batch_size = 4\nsample_count = 12\nresize_width = 10\nresize_height = 5\nrepetitions = 1\n"
    )
    assert main(["run", "--config", str(conf), "--out", str(tmp_path / "r.json")]) == 0
    assert "items/s" in capsys.readouterr().out
    assert main(["report", "--input", str(tmp_path / "r.json"), "--format", "csv", "--out", str(tmp_path / "r.csv")]) == 0
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 3
    assert main(["baseline", "--config", str(conf)]) == 0


def test_cli_usage_errors(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("sample_count = 2\nbatch_size = 8\n")
    assert main(["run", "--config", str(conf)]) == 2
    assert "sample_count" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "absent.conf")]) == 2
    assert main(["corpus", "--n", "0", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as info:
        main(["report", "--format", "yaml", "--input", "x"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2


def test_cli_runtime_failure(tmp_path, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text(f"workload = image\ncorpus = {tmp_path / 'nowhere'}\nsample_count = 32\n")
    assert main(["run", "--config", str(conf)]) == 3
    assert "runtime failure" in capsys.readouterr().err


def test_console_script_exit_code(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("repetitions = 0\n")
    proc = subprocess.run(
        [sys.executable, "-m", "spindle.bench.cli", "run", "--config", str(conf)], capture_output=True, text=True
    )
    assert proc.returncode == 2
    assert "repetitions" in proc.stderr
