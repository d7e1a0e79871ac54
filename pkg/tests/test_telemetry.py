import json
import math
import threading
import time

from hypothesis import given
from hypothesis import strategies as st

from spindle import PipelineBuilder, bottleneck_hint
from spindle.telemetry import (
    MIN_HINT_ITEMS,
    N_BUCKETS,
    DurationHistogram,
    Occupancy,
    bucket_bounds,
)


def sleeper(seconds):
    def fn(x):
        time.sleep(seconds)
        return x

    fn.__name__ = f"sleep_{int(seconds * 1000)}ms"
    return fn


def tenth_fails(x):
    if x % 10 == 0:
        raise ValueError(x)
    return x


def run(p):
    with p.auto_stop():
        return list(p)


def test_counters_zero_before_consumption():
    p = PipelineBuilder().add_source(range(10)).pipe(tenth_fails).add_sink(3).build(num_threads=1)
    s = p.snapshot()
    assert s.source_pulled == s.sink_emitted == s.sink_put == s.items_emitted == 0
    assert s.ttfb_us is None and s.wall_time_us == 0
    st_ = s.stage("tenth_fails")
    assert (st_.dequeued, st_.succeeded, st_.failed, st_.in_flight) == (0, 0, 0, 0)
    p.stop()


def test_failures_reconcile():
    p = (
        PipelineBuilder()
        .add_source(range(100))
        .pipe(tenth_fails, concurrency=4)
        .pipe(lambda x: x, name="after")
        .add_sink(3)
        .build(num_threads=4)
    )
    out = run(p)
    s = p.snapshot()
    assert len(out) == 90
    assert s.stage("tenth_fails").succeeded == 90 and s.stage("tenth_fails").failed == 10
    assert s.stage("after").dequeued == 90
    assert s.items_emitted == s.sink_emitted == 90
    assert s.items_failed == 10
    assert s.unaccounted() == 0
    r = p.stop_report
    assert (r.items_emitted, r.items_failed, r.items_abandoned, r.items_dropped) == (
        s.items_emitted,
        s.items_failed,
        s.items_abandoned,
        s.items_dropped,
    )


def test_snapshots_are_monotone_and_consistent():
    p = (
        PipelineBuilder()
        .add_source(range(300))
        .pipe(sleeper(0.001), concurrency=3)
        .pipe(tenth_fails, concurrency=2)
        .add_sink(2)
        .build(num_threads=3)
    )
    keys = ("dequeued", "succeeded", "failed")
    prev = None
    with p.auto_stop():
        for i, _ in enumerate(p):
            if i % 10:
                continue
            s = p.snapshot()
            for st_ in s.stages:
                assert st_.dequeued == st_.succeeded + st_.failed + st_.cancelled + st_.dropped + st_.in_flight
                assert 0 <= st_.in_flight <= st_.concurrency
                assert st_.output_queue_occupancy.max <= st_.queue_capacity
            if prev is not None:
                assert s.source_pulled >= prev.source_pulled
                assert s.sink_emitted >= prev.sink_emitted
                for a, b in zip(s.stages, prev.stages):
                    assert all(getattr(a, k) >= getattr(b, k) for k in keys)
            prev = s


def test_ttfb_and_wall_time():
    p = PipelineBuilder().add_source(range(5)).pipe(sleeper(0.02)).add_sink(3).build(num_threads=1)
    run(p)
    s = p.snapshot()
    assert 20_000 <= s.ttfb_us <= s.wall_time_us
    assert s.wall_time_us >= 100_000


def test_json_shape():
    p = PipelineBuilder().add_source(range(40)).pipe(tenth_fails).aggregate(8).add_sink(3).build(num_threads=2)
    run(p)
    d = json.loads(p.snapshot().to_json())
    assert set(d) == {
        "source_pulled", "source_wait_us", "source_blocked_on_put_us", "source_queue_occupancy",
        "sink_put", "sink_emitted", "sink_occupancy", "items_emitted", "items_failed",
        "items_abandoned", "items_dropped", "wall_time_us", "ttfb_us", "stages",
    }  # fmt: skip
    stage = d["stages"][0]
    assert set(stage) == {
        "name", "kind", "concurrency", "queue_capacity", "dequeued", "succeeded", "failed",
        "cancelled", "dropped", "in_flight", "blocked_on_put_us", "task_duration",
        "output_queue_occupancy",
    }  # fmt: skip
    assert set(stage["task_duration"]) == {"count", "sum_us", "min_us", "max_us", "p50_us", "p99_us"}
    assert set(stage["output_queue_occupancy"]) == {"samples", "sum", "max", "capacity"}
    assert [s["kind"] for s in d["stages"]] == ["map", "aggregate"]


# -- histogram ----------------------------------------------------------------------


def test_bucket_layout():
    lo, _ = bucket_bounds(0)
    _, hi = bucket_bounds(N_BUCKETS - 1)
    assert math.isclose(lo, 1.0) and math.isclose(hi, 100e6)


@given(st.lists(st.integers(1, 10**8), min_size=1, max_size=300), st.sampled_from([0.5, 0.99]))
def test_quantile_within_one_bucket(values, q):
    h = DurationHistogram()
    for v in values:
        h.record(v)
    exact = sorted(values)[max(1, math.ceil(q * len(values))) - 1]
    growth = bucket_bounds(1)[1] / bucket_bounds(1)[0]
    est = h.quantile(q)
    assert exact / growth <= est <= exact * growth
    assert h.min_us <= est <= h.max_us
    assert h.count == len(values) and h.sum_us == sum(values)


def test_empty_histogram():
    d = DurationHistogram().to_dict()
    assert d["count"] == 0 and d["p50_us"] is None


def test_occupancy_mean():
    o = Occupancy(4)
    for level in (0, 2, 4):
        o.sample(level)
    assert o.mean == 2 and o.max == 4


# -- bottleneck hint -----------------------------------------------------------------


def test_hint_names_slow_stage():
    fast = sleeper(0.001)
    slow = sleeper(0.05)
    p = (
        PipelineBuilder()
        .add_source(range(120))
        .pipe(fast, concurrency=4, name="fast_a")
        .pipe(slow, concurrency=4, name="slow")
        .pipe(fast, concurrency=4, name="fast_b")
        .add_sink(3)
        .build(num_threads=12)
    )
    run(p)
    hint = bottleneck_hint(p.snapshot())
    assert hint.conclusive
    assert hint.stage == "slow"
    assert hint.reason.startswith("max-share rule")


def test_hint_names_slow_source():
    def source():
        for i in range(150):
            time.sleep(0.005)
            yield i

    p = (
        PipelineBuilder()
        .add_source(source())
        .pipe(sleeper(0.0005), concurrency=2)
        .pipe(sleeper(0.0005), concurrency=2, name="second")
        .add_sink(3)
        .build(num_threads=4)
    )
    run(p)
    assert bottleneck_hint(p.snapshot()).stage == "source"


def test_hint_names_slow_consumer():
    p = PipelineBuilder().add_source(range(120)).pipe(sleeper(0.0005)).add_sink(3).build(num_threads=2)
    with p.auto_stop():
        for _ in p:
            time.sleep(0.005)
    assert bottleneck_hint(p.snapshot()).stage == "consumer"


def test_hint_inconclusive_below_threshold():
    p = PipelineBuilder().add_source(range(MIN_HINT_ITEMS - 1)).pipe(sleeper(0)).add_sink(3).build(num_threads=1)
    run(p)
    hint = bottleneck_hint(p.snapshot())
    assert not hint.conclusive
    assert "inconclusive" in hint.reason


# -- snapshot cost ---------------------------------------------------------------------


def _throughput(with_snapshots: bool) -> float:
    p = PipelineBuilder().add_source(range(200)).pipe(sleeper(0.01), concurrency=4).add_sink(3).build(num_threads=4)
    stop = threading.Event()
    taken = 0

    def snapper():
        nonlocal taken
        while not stop.wait(0.01):
            p.snapshot()
            taken += 1

    t = threading.Thread(target=snapper)
    if with_snapshots:
        t.start()
    t0 = time.perf_counter()
    n = len(run(p))
    elapsed = time.perf_counter() - t0
    stop.set()
    if with_snapshots:
        t.join()
        assert taken >= 30
    return n / elapsed


def test_snapshots_do_not_slow_the_pipeline():
    base = max(_throughput(False) for _ in range(2))
    loaded = max(_throughput(True) for _ in range(2))
    assert loaded >= 0.95 * base, (base, loaded)
