"""Per-stage observability: counters, task durations and queue occupancy.

Counters are updated from the control thread and the consumer thread and read
from anywhere through :meth:`StatsRecorder.snapshot`.  A snapshot is a deep
copy taken under one short-lived lock, so readers never hold up workers.

JSON shape of a snapshot (``PipelineStats.to_dict``)::

    {
      "source_pulled": int, "source_wait_us": int,
      "source_blocked_on_put_us": int, "source_queue_occupancy": {...},
      "sink_put": int, "sink_emitted": int, "sink_occupancy": {...},
      "items_emitted": int, "items_failed": int,
      "items_abandoned": int, "items_dropped": int,
      "wall_time_us": int, "ttfb_us": int | null,
      "stages": [
        {"name": str, "kind": "map" | "aggregate", "concurrency": int,
         "queue_capacity": int, "dequeued": int, "succeeded": int,
         "failed": int, "cancelled": int, "dropped": int, "in_flight": int,
         "blocked_on_put_us": int,
         "task_duration": {"count", "sum_us", "min_us", "max_us",
                           "p50_us", "p99_us"},
         "output_queue_occupancy": {"samples", "sum", "max", "capacity"}}
      ]
    }
"""

from __future__ import annotations

import copy
import json
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Any, NamedTuple

N_BUCKETS = 64
_LO_US = 1.0
_HI_US = 100e6
_GROWTH = (_HI_US / _LO_US) ** (1.0 / N_BUCKETS)

# bottleneck_hint refuses to guess below this many sink items
MIN_HINT_ITEMS = 100


def _bucket_index(us: float) -> int:
    if us <= _LO_US:
        return 0
    if us >= _HI_US:
        return N_BUCKETS - 1
    return min(N_BUCKETS - 1, int(math.log(us / _LO_US) / math.log(_GROWTH)))


def bucket_bounds(index: int) -> tuple[float, float]:
    """Lower and upper edge, in microseconds, of histogram bucket ``index``."""
    return _LO_US * _GROWTH**index, _LO_US * _GROWTH ** (index + 1)


@dataclass
class DurationHistogram:
    """Fixed 64-bucket log-scaled histogram spanning 1us to 100s."""

    count: int = 0
    sum_us: int = 0
    min_us: int | None = None
    max_us: int | None = None
    buckets: list[int] = field(default_factory=lambda: [0] * N_BUCKETS)

    def record(self, us: int) -> None:
        self.count += 1
        self.sum_us += us
        self.min_us = us if self.min_us is None else min(self.min_us, us)
        self.max_us = us if self.max_us is None else max(self.max_us, us)
        self.buckets[_bucket_index(us)] += 1

    def quantile(self, q: float) -> float | None:
        """Approximate quantile: geometric centre of the bucket holding rank q."""
        if self.count == 0:
            return None
        rank = max(1, math.ceil(q * self.count))
        seen = 0
        for i, n in enumerate(self.buckets):
            seen += n
            if seen >= rank:
                lo, hi = bucket_bounds(i)
                est = math.sqrt(lo * hi)
                return float(min(max(est, self.min_us), self.max_us))
        return float(self.max_us)

    def to_dict(self) -> dict[str, Any]:
        return {
            "count": self.count,
            "sum_us": self.sum_us,
            "min_us": self.min_us,
            "max_us": self.max_us,
            "p50_us": self.quantile(0.50),
            "p99_us": self.quantile(0.99),
        }


@dataclass
class Occupancy:
    """Queue fill level, sampled on every put and get."""

    capacity: int
    samples: int = 0
    sum: int = 0
    max: int = 0

    def sample(self, level: int) -> None:
        self.samples += 1
        self.sum += level
        if level > self.max:
            self.max = level

    @property
    def mean(self) -> float:
        return self.sum / self.samples if self.samples else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {"samples": self.samples, "sum": self.sum, "max": self.max, "capacity": self.capacity}


@dataclass
class StageStats:
    name: str
    kind: str
    concurrency: int
    queue_capacity: int
    dequeued: int = 0
    succeeded: int = 0
    failed: int = 0
    # tasks abandoned mid-function by stop(); zero unless a drain deadline was hit
    cancelled: int = 0
    # aggregate only: remainder items discarded at end of stream
    dropped: int = 0
    blocked_on_put_us: int = 0
    task_duration: DurationHistogram = field(default_factory=DurationHistogram)
    output_queue_occupancy: Occupancy = field(init=False)

    def __post_init__(self) -> None:
        self.output_queue_occupancy = Occupancy(self.queue_capacity)

    @property
    def in_flight(self) -> int:
        return self.dequeued - self.succeeded - self.failed - self.cancelled - self.dropped

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "concurrency": self.concurrency,
            "queue_capacity": self.queue_capacity,
            "dequeued": self.dequeued,
            "succeeded": self.succeeded,
            "failed": self.failed,
            "cancelled": self.cancelled,
            "dropped": self.dropped,
            "in_flight": self.in_flight,
            "blocked_on_put_us": self.blocked_on_put_us,
            "task_duration": self.task_duration.to_dict(),
            "output_queue_occupancy": self.output_queue_occupancy.to_dict(),
        }


@dataclass
class PipelineStats:
    stages: list[StageStats]
    source_queue_occupancy: Occupancy
    sink_occupancy: Occupancy
    source_pulled: int = 0
    source_wait_us: int = 0
    source_blocked_on_put_us: int = 0
    sink_put: int = 0
    sink_emitted: int = 0
    # the items_* counters are weighted by source items, so a batch of 32
    # that fails counts 32 towards items_failed
    items_emitted: int = 0
    items_failed: int = 0
    items_abandoned: int = 0
    items_dropped: int = 0
    wall_time_us: int = 0
    ttfb_us: int | None = None

    def stage(self, name: str) -> StageStats:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def unaccounted(self) -> int:
        """Source items not yet emitted, failed, abandoned or dropped.

        Zero on any snapshot taken after ``stop()``.
        """
        return self.source_pulled - (
            self.items_emitted + self.items_failed + self.items_abandoned + self.items_dropped
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_pulled": self.source_pulled,
            "source_wait_us": self.source_wait_us,
            "source_blocked_on_put_us": self.source_blocked_on_put_us,
            "source_queue_occupancy": self.source_queue_occupancy.to_dict(),
            "sink_put": self.sink_put,
            "sink_emitted": self.sink_emitted,
            "sink_occupancy": self.sink_occupancy.to_dict(),
            "items_emitted": self.items_emitted,
            "items_failed": self.items_failed,
            "items_abandoned": self.items_abandoned,
            "items_dropped": self.items_dropped,
            "wall_time_us": self.wall_time_us,
            "ttfb_us": self.ttfb_us,
            "stages": [s.to_dict() for s in self.stages],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class StatsRecorder:
    """Owns the live :class:`PipelineStats` of one pipeline.

    Mutators are cheap and take the recorder lock; ``snapshot`` copies the
    whole structure under the same lock.
    """

    def __init__(self, stages: list[StageStats], source_capacity: int, sink_capacity: int) -> None:
        self.lock = threading.Lock()
        self._live = PipelineStats(
            stages=stages,
            source_queue_occupancy=Occupancy(source_capacity),
            sink_occupancy=Occupancy(sink_capacity),
        )
        self._started_ns: int | None = None
        self._finished_ns: int | None = None

    @property
    def live(self) -> PipelineStats:
        return self._live

    def mark_started(self) -> None:
        with self.lock:
            self._started_ns = time.perf_counter_ns()

    def mark_finished(self) -> None:
        with self.lock:
            if self._finished_ns is None and self._started_ns is not None:
                self._finished_ns = time.perf_counter_ns()

    def mark_sink_put(self) -> None:
        with self.lock:
            s = self._live
            s.sink_put += 1
            if s.ttfb_us is None and self._started_ns is not None:
                s.ttfb_us = (time.perf_counter_ns() - self._started_ns) // 1000

    def add(self, **deltas: int) -> None:
        with self.lock:
            for key, value in deltas.items():
                setattr(self._live, key, getattr(self._live, key) + value)

    def stage_add(self, stage: StageStats, **deltas: int) -> None:
        with self.lock:
            for key, value in deltas.items():
                setattr(stage, key, getattr(stage, key) + value)

    def task_done(self, stage: StageStats, duration_us: int, ok: bool, weight: int) -> None:
        with self.lock:
            stage.task_duration.record(duration_us)
            if ok:
                stage.succeeded += 1
            else:
                stage.failed += 1
                self._live.items_failed += weight

    def sample(self, occupancy: Occupancy, level: int) -> None:
        with self.lock:
            occupancy.sample(level)

    def snapshot(self) -> PipelineStats:
        with self.lock:
            snap = copy.deepcopy(self._live)
            if self._started_ns is not None:
                end = self._finished_ns or time.perf_counter_ns()
                snap.wall_time_us = (end - self._started_ns) // 1000
        return snap


class BottleneckHint(NamedTuple):
    stage: str | None
    reason: str

    @property
    def conclusive(self) -> bool:
        return self.stage is not None


def bottleneck_hint(stats: PipelineStats) -> BottleneckHint:
    """Name the component that limits throughput.

    Candidates are scored by the share of wall time they spent being the
    limit: each stage by worker utilisation (task time over wall time times
    concurrency), the source by time spent producing items, and the consumer
    by how long the last stage sat blocked on a full sink.  The highest score
    wins.
    """
    if stats.sink_emitted < MIN_HINT_ITEMS or stats.wall_time_us <= 0:
        return BottleneckHint(
            None,
            f"inconclusive: {stats.sink_emitted} sink items, need at least {MIN_HINT_ITEMS}",
        )
    wall = stats.wall_time_us
    scores: list[tuple[float, str, str]] = []
    for s in stats.stages:
        util = s.task_duration.sum_us / (wall * s.concurrency)
        scores.append((util, s.name, f"workers of stage {s.name!r} busy {util:.0%} of wall time"))
    src = stats.source_wait_us / wall
    scores.append((src, "source", f"source spent {src:.0%} of wall time producing items"))
    if stats.stages:
        last = stats.stages[-1]
        blocked = last.blocked_on_put_us / (wall * last.concurrency)
        scores.append(
            (blocked, "consumer", f"last stage blocked on a full sink {blocked:.0%} of wall time")
        )
    score, name, reason = max(scores, key=lambda t: t[0])
    return BottleneckHint(name, f"max-share rule: {reason}")
