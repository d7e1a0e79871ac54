"""Run benchmark configurations and collect per-repetition measurements."""

from __future__ import annotations

import logging
import statistics
import struct
import threading
import time
from collections.abc import Iterable, Iterator
from dataclasses import asdict, dataclass, field
from typing import Any

import psutil

from ..executors import ExecutorBinding, dedicated_pool, shared_pool, subprocess_pool
from ..media import DeviceBatch, ImageFrame
from ..netsim import CorpusManifest, FetchProfile
from ..pipeline import Pipeline, PipelineBuilder
from ..telemetry import Occupancy, PipelineStats, bottleneck_hint
from .config import BenchConfig
from .workloads import REGISTRY_REF, ImageWorkload, manifest_source, sleep_stage

log = logging.getLogger(__name__)

SAMPLE_INTERVAL = 0.1


@dataclass
class BenchRow:
    workload: str
    executor: str
    ordering: str
    concurrency: int
    repetition: int
    worker_count: int
    batch_size: int
    items: int
    batches: int
    failed: int
    wall_us: int
    ttfb_us: int
    throughput: float
    throughput_adjusted: float
    per_item_us: float
    peak_rss_bytes: int
    cpu_user_s: float
    cpu_system_s: float
    bottleneck: str
    stats: dict[str, Any] = field(default_factory=dict, repr=False)

    def sort_key(self) -> tuple:
        return (self.workload, self.concurrency, self.repetition, self.executor)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> BenchRow:
        return cls(**d)


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def sorted_rows(self) -> list[BenchRow]:
        return sorted(self.rows, key=BenchRow.sort_key)

    def summary(self) -> list[dict[str, Any]]:
        """min/median/max of throughput and TTFB per (workload, executor, concurrency)."""
        groups: dict[tuple, list[BenchRow]] = {}
        for r in self.sorted_rows():
            groups.setdefault((r.workload, r.executor, r.concurrency), []).append(r)
        out = []
        for (workload, executor, conc), rows in sorted(groups.items()):
            tput = [r.throughput for r in rows]
            ttfb = [r.ttfb_us for r in rows]
            out.append(
                {
                    "workload": workload,
                    "executor": executor,
                    "concurrency": conc,
                    "repetitions": len(rows),
                    "throughput_min": min(tput),
                    "throughput_median": statistics.median(tput),
                    "throughput_max": max(tput),
                    "ttfb_us_min": min(ttfb),
                    "ttfb_us_median": statistics.median(ttfb),
                    "ttfb_us_max": max(ttfb),
                }
            )
        return out

    def ttfb_deltas(self) -> list[dict[str, Any]]:
        """Median TTFB of the subprocess backend minus the shared pool, per concurrency.

        ``flagged`` marks the expected direction: process launch makes the
        subprocess backend slower to its first batch.
        """
        med = {(s["workload"], s["executor"], s["concurrency"]): s["ttfb_us_median"] for s in self.summary()}
        out = []
        for (workload, executor, conc), sub in sorted(med.items()):
            if executor != "subprocess_pool":
                continue
            shared = med.get((workload, "shared_pool", conc))
            if shared is None:
                continue
            out.append(
                {
                    "workload": workload,
                    "concurrency": conc,
                    "subprocess_ttfb_us": sub,
                    "shared_ttfb_us": shared,
                    "delta_us": sub - shared,
                    "flagged": sub > shared,
                }
            )
        return out


class ResourceSampler:
    """Samples resident memory of this process and its children on a timer thread."""

    def __init__(self, interval: float = SAMPLE_INTERVAL) -> None:
        self.interval = interval
        self.proc = psutil.Process()
        self.peak_rss = 0
        self.samples = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="bench-sampler", daemon=True)

    def _rss(self) -> int:
        total = self.proc.memory_info().rss
        for child in self.proc.children(recursive=True):
            try:
                total += child.memory_info().rss
            except psutil.Error:
                pass
        return total

    def sample(self) -> None:
        try:
            rss = self._rss()
        except psutil.Error:
            return
        self.peak_rss = max(self.peak_rss, rss)
        self.samples += 1

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            self.sample()

    def __enter__(self) -> ResourceSampler:
        self.sample()
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._stop.set()
        self._thread.join()
        self.sample()


class WorkloadPlan:
    """Builds the pipeline and the equivalent plain loop for one configuration."""

    def __init__(self, config: BenchConfig) -> None:
        self.config = config
        self.image: ImageWorkload | None = None
        self.manifest: CorpusManifest | None = None
        if config.workload != "sleep":
            self.manifest = CorpusManifest.load(config.corpus)
            profile = None
            if config.workload == "fetch_image":
                profile = FetchProfile(
                    base_latency=config.fetch_latency_ms / 1000,
                    jitter=config.fetch_jitter_ms / 1000,
                    failure_rate=config.fetch_failure_rate,
                    rate_limit=config.fetch_rate_limit,
                    seed=config.seed,
                )
            self.image = ImageWorkload(
                self.manifest, config.resize_width, config.resize_height, config.cpu_burn, profile
            )

    @property
    def source_size(self) -> int:
        return self.config.source_size or self.config.sample_count

    def source(self, remote: bool = False) -> Iterator:
        n = self.source_size
        if self.config.workload == "sleep":
            if remote:
                ms = round(self.config.sleep_ms)
                return (struct.pack("<I", ms) + i.to_bytes(8, "little") for i in range(n))
            return iter(range(n))
        return manifest_source(self.manifest, n)

    def executor(self, kind: str, concurrency: int) -> ExecutorBinding:
        if kind == "subprocess_pool":
            return subprocess_pool(concurrency, REGISTRY_REF)
        if kind == "dedicated_pool":
            return dedicated_pool(concurrency)
        return shared_pool()

    def build(self, concurrency: int, kind: str = "shared_pool") -> Pipeline:
        cfg = self.config
        remote = kind == "subprocess_pool"
        binding = self.executor(kind, concurrency)
        b = PipelineBuilder().add_source(self.source(remote))
        if cfg.workload == "sleep":
            func = "sleep_echo" if remote else sleep_stage(cfg.sleep_ms)
            b.pipe(func, concurrency=concurrency, executor=binding, name="sleep")
            b.aggregate(cfg.batch_size)
        else:
            img = self.image
            if cfg.workload == "fetch_image":
                b.pipe(img.fetch, concurrency=concurrency, name="fetch")
            else:
                b.pipe(img.load, concurrency=concurrency, name="load")
            if remote:
                b.pipe(img.remote_request, name="pack")
                b.pipe("decode_resize", concurrency=concurrency, executor=binding, name="decode_resize")
                b.pipe(img.to_frame, name="unpack")
            else:
                b.pipe(img.decode_resize, concurrency=concurrency, executor=binding, name="decode_resize")
            b.aggregate(cfg.batch_size)
            b.pipe(img.batch_transfer, name="transfer")
        b.add_sink(cfg.sink_capacity)
        return b.build(num_threads=cfg.threads_for(concurrency), ordering=cfg.ordering)

    def run_sequential(self) -> Iterator[Any]:
        """The same stage functions in a plain loop, yielding what the sink would."""
        cfg = self.config
        src = self.source()
        if cfg.workload == "sleep":
            work = sleep_stage(cfg.sleep_ms)
            batch: list = []
            for item in src:
                batch.append(work(item))
                if len(batch) == cfg.batch_size:
                    yield batch
                    batch = []
            if batch:
                yield batch
            return
        img = self.image
        frames: list[ImageFrame] = []
        for entry in src:
            try:
                data = img.fetch(entry).result() if cfg.workload == "fetch_image" else img.load(entry)
                frames.append(img.decode_resize(data))
            except Exception:
                continue
            if len(frames) == cfg.batch_size:
                yield img.batch_transfer(frames)
                frames = []
        if frames:
            yield img.batch_transfer(frames)


def batch_len(out: Any) -> int:
    if isinstance(out, DeviceBatch):
        return out.shape[0]
    if isinstance(out, list):
        return len(out)
    return 1


def split_items(out: Any) -> list:
    """Per-item view of a sink output, for order-insensitive comparisons."""
    if isinstance(out, DeviceBatch):
        n = out.shape[0]
        size = len(out.data) // n
        return [out.data[i * size : (i + 1) * size] for i in range(n)]
    if out and isinstance(out[0], bytes) and len(out[0]) == 12:
        # remote sleep payloads carry the item index after the 4-byte duration
        return [int.from_bytes(p[4:], "little") for p in out]
    return list(out)


def _cpu_times(proc: psutil.Process) -> tuple[float, float]:
    t = proc.cpu_times()
    return t.user + t.children_user, t.system + t.children_system


def _measure(
    pipeline_factory,
    config: BenchConfig,
    *,
    executor: str,
    concurrency: int,
    repetition: int,
    collect: list | None = None,
) -> BenchRow:
    proc = psutil.Process()
    cpu0 = _cpu_times(proc)
    target = config.items
    items = batches = 0
    first_items = 0
    ttfb_us = 0
    with ResourceSampler() as sampler:
        t0 = time.perf_counter()
        pipe: Pipeline = pipeline_factory()
        try:
            for out in pipe:
                if batches == 0:
                    ttfb_us = int((time.perf_counter() - t0) * 1e6)
                    first_items = batch_len(out)
                batches += 1
                items += batch_len(out)
                if collect is not None:
                    collect.append(out)
                if items >= target:
                    break
            wall_us = int((time.perf_counter() - t0) * 1e6)
        finally:
            pipe.stop()
    cpu1 = _cpu_times(proc)
    stats = pipe.snapshot()
    wall_s = wall_us / 1e6
    rest_s = (wall_us - ttfb_us) / 1e6
    adjusted = (items - first_items) / rest_s if rest_s > 0 and items > first_items else 0.0
    return BenchRow(
        workload=config.workload,
        executor=executor,
        ordering=config.ordering,
        concurrency=concurrency,
        repetition=repetition,
        worker_count=config.threads_for(concurrency),
        batch_size=config.batch_size,
        items=items,
        batches=batches,
        failed=stats.items_failed,
        wall_us=wall_us,
        ttfb_us=ttfb_us,
        throughput=items / wall_s if wall_s > 0 else 0.0,
        throughput_adjusted=adjusted,
        per_item_us=wall_us / items if items else 0.0,
        peak_rss_bytes=sampler.peak_rss,
        cpu_user_s=round(cpu1[0] - cpu0[0], 6),
        cpu_system_s=round(cpu1[1] - cpu0[1], 6),
        bottleneck=bottleneck_hint(stats).stage or "",
        stats=stats.to_dict(),
    )


def run_benchmark(config: BenchConfig, *, collect: dict | None = None) -> BenchReport:
    """Sweep executors x concurrency levels x repetitions.

    When ``collect`` is a dict, the sink outputs of each run are stored under
    ``(executor, concurrency, repetition)``.
    """
    config.validate()
    plan = WorkloadPlan(config)
    report = BenchReport()
    for executor in config.executor:
        for conc in config.concurrency_list:
            for rep in range(config.repetitions):
                outs = [] if collect is not None else None
                row = _measure(
                    lambda: plan.build(conc, executor),
                    config,
                    executor=executor,
                    concurrency=conc,
                    repetition=rep,
                    collect=outs,
                )
                if collect is not None:
                    collect[(executor, conc, rep)] = outs
                log.info(
                    "%s %s c=%d rep=%d: %.1f items/s ttfb=%dus",
                    config.workload, executor, conc, rep, row.throughput, row.ttfb_us,
                )
                report.rows.append(row)
    return report


def _passthrough(item):
    return item


def run_baseline_sequential(config: BenchConfig, *, collect: dict | None = None) -> BenchReport:
    """Lower bound (plain loop over the stage functions) and upper bound
    (a no-op single-stage pipeline over the same source).
    """
    config.validate()
    plan = WorkloadPlan(config)
    report = BenchReport()
    for rep in range(config.repetitions):
        outs = [] if collect is not None else None
        row = _measure(
            lambda: _LoopRunner(plan.run_sequential()),
            config,
            executor="sequential",
            concurrency=1,
            repetition=rep,
            collect=outs,
        )
        if collect is not None:
            collect[("sequential", 1, rep)] = outs
        report.rows.append(row)

        def passthrough() -> Pipeline:
            return (
                PipelineBuilder()
                .add_source(plan.source())
                .pipe(_passthrough, name="passthrough")
                .add_sink(config.sink_capacity)
                .build(num_threads=1)
            )

        row = _measure(passthrough, config, executor="passthrough", concurrency=1, repetition=rep)
        report.rows.append(row)
    return report


class _LoopRunner:
    """Adapts a plain generator to the slice of the Pipeline API ``_measure`` uses."""

    def __init__(self, outputs: Iterable) -> None:
        self._outputs = outputs
        self._emitted = 0

    def __iter__(self):
        for out in self._outputs:
            self._emitted += batch_len(out)
            yield out

    def stop(self) -> None:
        close = getattr(self._outputs, "close", None)
        if close:
            close()

    def snapshot(self):
        return PipelineStats(
            stages=[],
            source_queue_occupancy=Occupancy(1),
            sink_occupancy=Occupancy(1),
            source_pulled=self._emitted,
            items_emitted=self._emitted,
        )
