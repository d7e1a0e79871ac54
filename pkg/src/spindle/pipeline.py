"""Linear staged pipelines: builder, control thread, bounded queues and sink.

A :class:`Pipeline` owns one control thread running an asyncio loop.  The loop
pulls the source, admits stage tasks and moves results between bounded
queues; the stage functions themselves run on executor workers, never on the
control thread.  Every queue entry is a ``(weight, value)`` pair where weight
is the number of source items the value stands for, which is what keeps the
end-to-end accounting exact across aggregate stages.
"""

from __future__ import annotations

import asyncio
import concurrent.futures
import contextlib
import inspect
import logging
import os
import sys
import threading
import time
from collections import deque
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field
from typing import Any

from .executors import (
    DEDICATED,
    SHARED,
    SUBPROCESS,
    ExecutorBinding,
    SubprocessPool,
    WorkerPool,
    load_registry,
)
from .telemetry import Occupancy, PipelineStats, StageStats, StatsRecorder

log = logging.getLogger(__name__)
_trace = logging.getLogger("spindle.trace")

MAP = "map"
AGGREGATE = "aggregate"
SKIP_AND_RECORD = "skip_and_record"
FAIL_FAST = "fail_fast"
COMPLETION = "completion"
FIFO = "fifo"

DEFAULT_DRAIN_DEADLINE = 10.0
FAILURE_WINDOW = 100
# idle pool threads and clean subprocess exits get at least this long
_SHUTDOWN_GRACE = 0.1


class ConstructionError(ValueError):
    """Invalid pipeline definition."""


class PipelineError(RuntimeError):
    """Pipeline used outside its lifecycle."""


class PipelineAborted(PipelineError):
    """Raised to the consumer when a stage failure stops the pipeline."""


class TimedOut(TimeoutError):
    """``next_item`` waited its full timeout without an item."""


class _EndOfStreamType:
    _instance = None

    def __new__(cls) -> _EndOfStreamType:
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "EndOfStream"


EndOfStream = _EndOfStreamType()
_EOS = EndOfStream


@dataclass(frozen=True)
class StageConfig:
    kind: str
    func: Callable | str | None = None
    concurrency: int = 1
    batch_size: int | None = None
    flush_remainder: bool = True
    queue_capacity: int | None = None
    executor: ExecutorBinding = field(default_factory=ExecutorBinding)
    error_policy: str = SKIP_AND_RECORD
    failure_abort_ratio: float | None = None
    name: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in (MAP, AGGREGATE):
            raise ConstructionError(f"unknown stage kind {self.kind!r}")
        if not isinstance(self.concurrency, int) or self.concurrency < 1:
            raise ConstructionError(f"concurrency must be a positive integer, got {self.concurrency!r}")
        if self.queue_capacity is not None and (
            not isinstance(self.queue_capacity, int) or self.queue_capacity < 1
        ):
            raise ConstructionError(f"queue_capacity must be a positive integer, got {self.queue_capacity!r}")
        if self.kind == AGGREGATE:
            if self.func is not None or self.concurrency != 1:
                raise ConstructionError("aggregate stages take no function and run with concurrency 1")
            if not isinstance(self.batch_size, int) or self.batch_size < 1:
                raise ConstructionError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        elif self.func is None:
            raise ConstructionError("map stages need a function")
        if self.error_policy not in (SKIP_AND_RECORD, FAIL_FAST):
            raise ConstructionError(f"unknown error policy {self.error_policy!r}")
        r = self.failure_abort_ratio
        if r is not None and not 0.0 < r <= 1.0:
            raise ConstructionError(f"failure_abort_ratio must be in (0, 1], got {r}")

    @property
    def capacity(self) -> int:
        # default: as many slots as the stage can have tasks
        return self.queue_capacity if self.queue_capacity is not None else self.concurrency


@dataclass(frozen=True)
class StopReport:
    items_emitted: int = 0
    items_failed: int = 0
    items_abandoned: int = 0
    items_dropped: int = 0
    drain_deadline_hit: bool = False
    # pool threads still stuck inside a stage function when stop() returned
    leaked_threads: int = 0
    killed_workers: tuple[int, ...] = ()


# -- queues ------------------------------------------------------------------


def _wake_one(waiters: deque) -> None:
    while waiters:
        w = waiters.popleft()
        if not w.done():
            w.set_result(None)
            return


class _StageQueue:
    """Bounded FIFO between two stages; used only on the control thread."""

    def __init__(
        self,
        capacity: int,
        recorder: StatsRecorder,
        occupancy: Occupancy,
        on_blocked: Callable[[int], None],
    ) -> None:
        self.capacity = capacity
        self._rec = recorder
        self._occ = occupancy
        self._on_blocked = on_blocked
        self._items: deque = deque()
        self._getters: deque = deque()
        self._putters: deque = deque()
        self._eos = False
        self._closed = False

    def __len__(self) -> int:
        return len(self._items)

    async def wait_slot(self) -> bool:
        """Wait until a put would not block; False once the queue is closed."""
        t0 = None
        try:
            while len(self._items) >= self.capacity and not self._closed:
                if t0 is None:
                    t0 = time.perf_counter_ns()
                fut = asyncio.get_running_loop().create_future()
                self._putters.append(fut)
                try:
                    await fut
                except asyncio.CancelledError:
                    if fut.done() and not fut.cancelled():
                        _wake_one(self._putters)
                    raise
        finally:
            if t0 is not None:
                self._on_blocked((time.perf_counter_ns() - t0) // 1000)
        return not self._closed

    def put_nowait(self, entry: tuple[int, Any]) -> None:
        self._items.append(entry)
        self._rec.sample(self._occ, len(self._items))
        _wake_one(self._getters)

    async def put(self, entry: tuple[int, Any]) -> bool:
        if not await self.wait_slot():
            return False
        self.put_nowait(entry)
        return True

    def put_eos(self) -> None:
        self._eos = True
        while self._getters:
            _wake_one(self._getters)

    async def get(self) -> Any:
        while not self._items:
            if self._eos:
                return _EOS
            fut = asyncio.get_running_loop().create_future()
            self._getters.append(fut)
            try:
                await fut
            except asyncio.CancelledError:
                if fut.done() and not fut.cancelled():
                    _wake_one(self._getters)
                raise
        entry = self._items.popleft()
        self._rec.sample(self._occ, len(self._items))
        _wake_one(self._putters)
        return entry

    def close(self) -> None:
        self._closed = True
        while self._putters:
            _wake_one(self._putters)

    def drain(self) -> list:
        items = list(self._items)
        self._items.clear()
        return items


class _Sink:
    """Bounded hand-off from the control thread to the consumer thread."""

    def __init__(self, capacity: int, recorder: StatsRecorder, on_blocked: Callable[[int], None]) -> None:
        self.capacity = capacity
        self._rec = recorder
        self._occ = recorder.live.sink_occupancy
        self._on_blocked = on_blocked
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._waiters: deque = deque()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._closed = False
        self._final: Any = None

    def bind(self, loop: asyncio.AbstractEventLoop) -> None:
        self._loop = loop

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)

    # control-thread side

    async def wait_slot(self) -> bool:
        t0 = None
        try:
            while True:
                with self._cond:
                    if self._closed:
                        return False
                    if len(self._items) < self.capacity:
                        return True
                    fut = self._loop.create_future()
                    self._waiters.append(fut)
                if t0 is None:
                    t0 = time.perf_counter_ns()
                try:
                    await fut
                except asyncio.CancelledError:
                    with self._cond:
                        if fut.done() and not fut.cancelled():
                            self._wake_locked()
                        else:
                            with contextlib.suppress(ValueError):
                                self._waiters.remove(fut)
                    raise
        finally:
            if t0 is not None:
                self._on_blocked((time.perf_counter_ns() - t0) // 1000)

    def put_nowait(self, entry: tuple[int, Any]) -> None:
        with self._cond:
            self._items.append(entry)
            self._rec.sample(self._occ, len(self._items))
            self._cond.notify()
        self._rec.mark_sink_put()

    async def put(self, entry: tuple[int, Any]) -> bool:
        # only control-thread producers fill the sink, so a free slot stays free
        if not await self.wait_slot():
            return False
        self.put_nowait(entry)
        return True

    def put_eos(self) -> None:
        self.finish(_EOS)

    def finish(self, final: Any) -> None:
        """Append a terminal marker (end of stream or an error) past capacity."""
        with self._cond:
            if self._final is None:
                self._final = final
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            waiters = list(self._waiters)
            self._waiters.clear()
        for w in waiters:
            if not w.done():
                w.set_result(None)

    def _wake_locked(self) -> None:
        if self._waiters and self._loop is not None:
            w = self._waiters.popleft()
            try:
                self._loop.call_soon_threadsafe(self._resolve, w)
            except RuntimeError:
                pass

    def _resolve(self, w: asyncio.Future) -> None:
        if not w.done():
            w.set_result(None)
        else:
            with self._cond:
                self._wake_locked()

    # consumer side

    def get(self, timeout: float | None) -> Any:
        with self._cond:
            if not self._cond.wait_for(lambda: self._items or self._final is not None, timeout):
                raise TimedOut(f"no item within {timeout}s")
            if not self._items:
                return self._final
            entry = self._items.popleft()
            self._rec.sample(self._occ, len(self._items))
            self._wake_locked()
            return entry

    def drain(self) -> list:
        with self._cond:
            items = list(self._items)
            self._items.clear()
            return items


# -- stages --------------------------------------------------------------------


async def _await_any(awaitable: Any) -> Any:
    return await awaitable


class _AsyncRunner:
    """Event loop thread for coroutine stage functions and returned awaitables."""

    def __init__(self, name: str) -> None:
        self._name = name
        self._loop: asyncio.AbstractEventLoop | None = None
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()

    def submit(self, coro: Any) -> concurrent.futures.Future:
        with self._lock:
            if self._loop is None:
                ready = threading.Event()
                self._thread = threading.Thread(target=self._run, args=(ready,), name=self._name, daemon=True)
                self._thread.start()
                ready.wait()
        return asyncio.run_coroutine_threadsafe(coro, self._loop)

    def _run(self, ready: threading.Event) -> None:
        loop = asyncio.new_event_loop()
        self._loop = loop
        ready.set()
        try:
            loop.run_forever()
            tasks = asyncio.all_tasks(loop)
            for t in tasks:
                t.cancel()
            if tasks:
                loop.run_until_complete(asyncio.wait(tasks, timeout=_SHUTDOWN_GRACE))
        finally:
            loop.close()

    def stop(self, timeout: float) -> None:
        with self._lock:
            loop, thread = self._loop, self._thread
        if loop is None:
            return
        with contextlib.suppress(RuntimeError):
            loop.call_soon_threadsafe(loop.stop)
        thread.join(timeout)


class _Stage:
    def __init__(self, pipe: Pipeline, index: int, cfg: StageConfig, stats: StageStats) -> None:
        self.pipe = pipe
        self.index = index
        self.cfg = cfg
        self.stats = stats
        self.name = stats.name
        self.inq: _StageQueue | None = None
        self.outq: _StageQueue | _Sink | None = None
        # source items held by the coordinator itself (aggregate buffers)
        self.held = 0

    def _trace(self, event: str, seq: int, dur_us: int = 0) -> None:
        if self.pipe._tracing:
            _trace.debug("stage=%s event=%s item_seq=%d dur_us=%d", self.name, event, seq, dur_us)


class _MapStage(_Stage):
    def __init__(self, pipe: Pipeline, index: int, cfg: StageConfig, stats: StageStats) -> None:
        super().__init__(pipe, index, cfg, stats)
        self.func = cfg.func
        self.is_coro = inspect.iscoroutinefunction(cfg.func)
        self.backend: Any = None
        self.tasks: dict[asyncio.Task, int] = {}
        self._sem: asyncio.Semaphore | None = None
        self._ordered = pipe.ordering == FIFO
        self._next_emit = 0
        self._turns: dict[int, asyncio.Future] = {}
        self._closing = False
        self._window: deque[bool] = deque(maxlen=FAILURE_WINDOW)

    async def run(self) -> None:
        self._sem = asyncio.Semaphore(self.cfg.concurrency)
        seq = 0
        while True:
            await self._sem.acquire()
            entry = await self.inq.get()
            if entry is _EOS:
                self._sem.release()
                break
            weight, value = entry
            self.pipe._rec.stage_add(self.stats, dequeued=1)
            task = asyncio.create_task(self._process(seq, weight, value))
            self.tasks[task] = weight
            task.add_done_callback(self._forget)
            seq += 1
        if self.tasks:
            await asyncio.wait(list(self.tasks))
        self._trace("eos", seq)
        self.outq.put_eos()

    def _forget(self, task: asyncio.Task) -> None:
        self.tasks.pop(task, None)
        if not task.cancelled() and task.exception() is not None:
            self.pipe._request_abort(PipelineError(f"stage {self.name!r} task crashed"), task.exception())

    async def _invoke(self, value: Any) -> Any:
        if self.is_coro:
            return await asyncio.wrap_future(self.pipe._async_runner.submit(self.func(value)))
        result = await asyncio.wrap_future(self.backend.submit(self.func, value))
        if isinstance(result, concurrent.futures.Future):
            result = await asyncio.wrap_future(result)
        elif inspect.isawaitable(result):
            result = await asyncio.wrap_future(self.pipe._async_runner.submit(_await_any(result)))
        return result

    async def _process(self, seq: int, weight: int, value: Any) -> None:
        rec = self.pipe._rec
        resolved = False
        in_func = True
        try:
            self._trace("start", seq)
            t0 = time.perf_counter_ns()
            try:
                result = await self._invoke(value)
            except asyncio.CancelledError:
                raise
            except Exception as e:
                dur = (time.perf_counter_ns() - t0) // 1000
                in_func = False
                rec.task_done(self.stats, dur, ok=False, weight=weight)
                resolved = True
                self._trace("fail", seq, dur)
                log.warning("stage %s: item %d failed: %s: %s", self.name, seq, type(e).__name__, e)
                self._record_outcome(False, e)
                if self._ordered and await self._take_turn(seq):
                    self._pass_turn()
                return
            dur = (time.perf_counter_ns() - t0) // 1000
            in_func = False
            rec.task_done(self.stats, dur, ok=True, weight=weight)
            self._trace("ok", seq, dur)
            self._record_outcome(True, None)
            if self._ordered and not await self._take_turn(seq):
                ok = False
            else:
                ok = await self.outq.put((weight, result))
                if self._ordered:
                    self._pass_turn()
            resolved = True
            if not ok:
                rec.add(items_abandoned=weight)
        except asyncio.CancelledError:
            if not resolved:
                if in_func:
                    rec.stage_add(self.stats, cancelled=1)
                rec.add(items_abandoned=weight)
            raise
        finally:
            self._sem.release()

    def _record_outcome(self, ok: bool, error: BaseException | None) -> None:
        if not ok and self.cfg.error_policy == FAIL_FAST:
            self.pipe._request_abort(PipelineAborted(f"stage {self.name!r} failed"), error)
            return
        ratio = self.cfg.failure_abort_ratio
        if ratio is None:
            return
        self._window.append(not ok)
        failed = sum(self._window)
        # the denominator is the full window, so a few early failures cannot trip it
        if failed / FAILURE_WINDOW > ratio:
            self.pipe._request_abort(
                PipelineAborted(
                    f"stage {self.name!r}: {failed} of the last {FAILURE_WINDOW} completions failed, "
                    f"above the abort ratio {ratio}"
                ),
                error,
            )

    async def _take_turn(self, seq: int) -> bool:
        while self._next_emit != seq:
            if self._closing:
                return False
            fut = asyncio.get_running_loop().create_future()
            self._turns[seq] = fut
            try:
                await fut
            finally:
                self._turns.pop(seq, None)
        return not self._closing

    def _pass_turn(self) -> None:
        self._next_emit += 1
        w = self._turns.get(self._next_emit)
        if w is not None and not w.done():
            w.set_result(None)

    def close(self) -> None:
        self._closing = True
        for w in list(self._turns.values()):
            if not w.done():
                w.set_result(None)


class _AggregateStage(_Stage):
    async def run(self) -> None:
        rec = self.pipe._rec
        size = self.cfg.batch_size
        buf: list = []
        weight = 0
        seq = 0
        while True:
            entry = await self.inq.get()
            if entry is _EOS:
                break
            w, value = entry
            rec.stage_add(self.stats, dequeued=1)
            buf.append(value)
            weight += w
            self.held = weight
            if len(buf) == size:
                batch, batch_weight = buf, weight
                buf, weight = [], 0
                await self._emit(seq, batch, batch_weight)
                seq += 1
        if buf:
            if self.cfg.flush_remainder:
                await self._emit(seq, buf, weight)
            else:
                rec.stage_add(self.stats, dropped=len(buf))
                rec.add(items_dropped=weight)
                self.held = 0
        self._trace("eos", seq)
        self.outq.put_eos()

    async def _emit(self, seq: int, batch: list, weight: int) -> None:
        rec = self.pipe._rec
        ok = await self.outq.put((weight, batch))
        self.held = 0
        if ok:
            rec.stage_add(self.stats, succeeded=len(batch))
            self._trace("ok", seq)
        else:
            rec.stage_add(self.stats, cancelled=len(batch))
            rec.add(items_abandoned=weight)


# -- pipeline ------------------------------------------------------------------


class Pipeline:
    """A built pipeline.  Iterate it, or call :meth:`next_item`, from one thread.

    The control thread starts lazily on the first consumption (or on
    :meth:`start`), so building a pipeline runs no stage function.
    """

    def __init__(
        self,
        source: Iterable,
        stages: list[StageConfig],
        *,
        source_capacity: int,
        sink_capacity: int,
        worker_count: int,
        ordering: str,
    ) -> None:
        self.ordering = ordering
        self.worker_count = worker_count
        self.sink_capacity = sink_capacity
        self.source_capacity = source_capacity
        self.configs = list(stages)
        self._source = source
        self._state = "built"
        self._lock = threading.Lock()
        self._tracing = os.environ.get("SPINDLE_TRACE") == "1"
        if self._tracing and not _trace.handlers:
            handler = logging.StreamHandler(sys.stderr)
            handler.setFormatter(logging.Formatter("%(message)s"))
            _trace.addHandler(handler)
            _trace.setLevel(logging.DEBUG)

        stats = []
        names: set[str] = set()
        for i, cfg in enumerate(stages):
            if cfg.name:
                name = cfg.name
            elif cfg.kind == AGGREGATE:
                name = f"aggregate({cfg.batch_size})"
            elif isinstance(cfg.func, str):
                name = cfg.func
            else:
                name = getattr(cfg.func, "__name__", type(cfg.func).__name__)
            if name in names:
                name = f"{name}#{i}"
            names.add(name)
            stats.append(StageStats(name, cfg.kind, cfg.concurrency, cfg.capacity))
        self._rec = StatsRecorder(stats, source_capacity, sink_capacity)

        self._stages: list[_Stage] = [
            (_MapStage if cfg.kind == MAP else _AggregateStage)(self, i, cfg, s)
            for i, (cfg, s) in enumerate(zip(stages, stats))
        ]
        last_blocked = (
            (lambda us: self._rec.stage_add(stats[-1], blocked_on_put_us=us))
            if stats
            else (lambda us: self._rec.add(source_blocked_on_put_us=us))
        )
        self._sink = _Sink(sink_capacity, self._rec, last_blocked)
        self._queues: list[_StageQueue] = []
        if self._stages:
            src_q = _StageQueue(
                source_capacity,
                self._rec,
                self._rec.live.source_queue_occupancy,
                lambda us: self._rec.add(source_blocked_on_put_us=us),
            )
            self._queues.append(src_q)
            self._stages[0].inq = src_q
            for prev, nxt in zip(self._stages, self._stages[1:]):
                q = _StageQueue(
                    prev.cfg.capacity,
                    self._rec,
                    prev.stats.output_queue_occupancy,
                    lambda us, s=prev.stats: self._rec.stage_add(s, blocked_on_put_us=us),
                )
                self._queues.append(q)
                prev.outq = q
                nxt.inq = q
            self._stages[-1].outq = self._sink
        self._source_out: _StageQueue | _Sink = self._queues[0] if self._queues else self._sink

        self._thread: threading.Thread | None = None
        self._loop: asyncio.AbstractEventLoop | None = None
        self._ready = threading.Event()
        self._stop_event: asyncio.Event | None = None
        self._runners: list[asyncio.Task] = []
        self._drain_deadline = DEFAULT_DRAIN_DEADLINE
        self._abort_exc: BaseException | None = None
        self._deadline_hit = False
        self._leaked_threads = 0
        self._killed_workers: list[int] = []
        self._thread_pools: list[WorkerPool] = []
        self._subprocess_pools: list[SubprocessPool] = []
        self._async_runner = _AsyncRunner("spindle-async")
        self._terminal_seen = False
        self._in_scope = False
        self._report: StopReport | None = None
        self.control_thread_ident: int | None = None

    # -- consumer API ---------------------------------------------------------

    @property
    def state(self) -> str:
        return self._state

    @property
    def stage_names(self) -> list[str]:
        return [s.name for s in self._stages]

    def snapshot(self) -> PipelineStats:
        return self._rec.snapshot()

    @property
    def stats(self) -> PipelineStats:
        return self.snapshot()

    @property
    def stop_report(self) -> StopReport | None:
        return self._report

    def start(self) -> None:
        with self._lock:
            if self._state == "running":
                return
            if self._state != "built":
                raise PipelineError(f"cannot start a {self._state} pipeline")
            self._state = "running"
        self._rec.mark_started()
        self._thread = threading.Thread(target=self._thread_main, name="spindle-control", daemon=True)
        self._thread.start()
        self._ready.wait()

    def next_item(self, timeout: float | None = None) -> Any:
        """Next output item, or :data:`EndOfStream` once the stream is done.

        Raises :class:`TimedOut` if nothing arrives within ``timeout`` seconds
        and :class:`PipelineAborted` if a stage failure stopped the pipeline.
        """
        if self._state == "built":
            self.start()
        if self._state != "running":
            raise PipelineError(f"pipeline is {self._state}")
        if self._terminal_seen:
            raise PipelineError("EndOfStream was already returned")
        entry = self._sink.get(timeout)
        if entry is _EOS:
            self._terminal_seen = True
            return EndOfStream
        if isinstance(entry, BaseException):
            self._terminal_seen = True
            raise entry
        weight, value = entry
        self._rec.add(sink_emitted=1, items_emitted=weight)
        return value

    def __iter__(self) -> Iterator[Any]:
        while True:
            item = self.next_item()
            if item is EndOfStream:
                return
            yield item

    def stop(self, drain_deadline: float = DEFAULT_DRAIN_DEADLINE) -> StopReport:
        """Stop pulling, drain in-flight tasks for up to ``drain_deadline`` seconds.

        Never raises; idempotent.
        """
        with self._lock:
            if self._report is not None:
                return self._report
            if self._state == "built":
                self._state = "stopped"
                self._report = StopReport()
                return self._report
            self._state = "draining"
        t = self._thread
        if t is not None and t.is_alive():
            with contextlib.suppress(RuntimeError):
                self._loop.call_soon_threadsafe(self._request_stop, drain_deadline)
            t.join(drain_deadline + 5 * _SHUTDOWN_GRACE + 1.0)
            if t.is_alive():
                log.error("control thread did not exit within the drain deadline")
        leftover = self._sink.drain()
        if leftover:
            self._rec.add(items_abandoned=sum(w for w, _ in leftover))
        self._rec.mark_finished()
        snap = self._rec.snapshot()
        self._report = StopReport(
            items_emitted=snap.items_emitted,
            items_failed=snap.items_failed,
            items_abandoned=snap.items_abandoned,
            items_dropped=snap.items_dropped,
            drain_deadline_hit=self._deadline_hit,
            leaked_threads=self._leaked_threads,
            killed_workers=tuple(self._killed_workers),
        )
        self._state = "stopped"
        return self._report

    @contextlib.contextmanager
    def auto_stop(self, drain_deadline: float = DEFAULT_DRAIN_DEADLINE) -> Iterator[Pipeline]:
        """Context manager that guarantees :meth:`stop` on every exit path."""
        with self._lock:
            if self._in_scope:
                raise PipelineError("pipeline is already inside an auto_stop scope")
            if self._state not in ("built", "running"):
                raise PipelineError(f"pipeline is {self._state}")
            self._in_scope = True
        try:
            yield self
        finally:
            self.stop(drain_deadline)

    # -- control thread ---------------------------------------------------------

    def _thread_main(self) -> None:
        self.control_thread_ident = threading.get_ident()
        loop = asyncio.new_event_loop()
        self._loop = loop
        try:
            loop.run_until_complete(self._main())
        except BaseException:
            log.exception("pipeline control loop crashed")
            self._sink.finish(PipelineAborted("pipeline control loop crashed"))
        finally:
            self._rec.mark_finished()
            loop.close()

    def _request_stop(self, deadline: float) -> None:
        self._drain_deadline = deadline
        self._stop_event.set()

    def _request_abort(self, exc: BaseException, cause: BaseException | None) -> None:
        if self._abort_exc is None:
            exc.__cause__ = cause
            self._abort_exc = exc
            log.error("aborting pipeline: %s", exc)
        self._stop_event.set()

    def _open_backends(self) -> None:
        shared = WorkerPool(self.worker_count, name="spindle-shared")
        self._thread_pools.append(shared)
        for st in self._stages:
            if not isinstance(st, _MapStage) or st.is_coro:
                continue
            b = st.cfg.executor
            if b.kind == SHARED:
                st.backend = shared
            elif b.kind == DEDICATED:
                st.backend = WorkerPool(b.size, name=f"spindle-{b.label}")
                self._thread_pools.append(st.backend)
            elif b.kind == SUBPROCESS:
                pool = SubprocessPool(b.size, b.registry, name=b.label, init_delay=b.init_delay)
                self._subprocess_pools.append(pool)
                pool.start()
                st.backend = pool

    def _close_backends(self, deadline: float) -> None:
        grace = max(deadline, _SHUTDOWN_GRACE)
        end = time.monotonic() + grace
        for pool in self._subprocess_pools:
            status = pool.shutdown(max(_SHUTDOWN_GRACE, end - time.monotonic()))
            self._killed_workers.extend(status.killed)
        leaked = 0
        for pool in self._thread_pools:
            leaked += len(pool.shutdown(wait=True, timeout=max(_SHUTDOWN_GRACE, end - time.monotonic())))
        self._leaked_threads = leaked
        self._async_runner.stop(_SHUTDOWN_GRACE)

    async def _pump_source(self) -> None:
        rec = self._rec
        out = self._source_out
        it = iter(self._source)
        seq = 0
        while True:
            if not await out.wait_slot():
                return
            t0 = time.perf_counter_ns()
            try:
                item = next(it)
            except StopIteration:
                break
            except Exception as e:
                self._request_abort(PipelineAborted("source raised"), e)
                return
            finally:
                rec.add(source_wait_us=(time.perf_counter_ns() - t0) // 1000)
            rec.add(source_pulled=1)
            out.put_nowait((1, item))
            seq += 1
        if self._tracing:
            _trace.debug("stage=source event=eos item_seq=%d dur_us=0", seq)
        out.put_eos()

    async def _main(self) -> None:
        loop = asyncio.get_running_loop()
        self._stop_event = asyncio.Event()
        self._sink.bind(loop)
        self._ready.set()
        try:
            self._open_backends()
        except Exception as e:
            self._request_abort(PipelineAborted(f"executor startup failed: {e}"), e)
            self._close_backends(_SHUTDOWN_GRACE)
            self._sink.finish(self._abort_exc)
            return
        self._runners = [asyncio.create_task(self._pump_source())]
        self._runners += [asyncio.create_task(s.run()) for s in self._stages]
        stop_wait = asyncio.create_task(self._stop_event.wait())
        pending = set(self._runners)
        while pending and not self._stop_event.is_set():
            done, pending = await asyncio.wait(pending | {stop_wait}, return_when=asyncio.FIRST_COMPLETED)
            pending.discard(stop_wait)
        if not self._stop_event.is_set():
            stop_wait.cancel()
            self._close_backends(_SHUTDOWN_GRACE)
            return
        await self._drain(self._drain_deadline)
        if self._abort_exc is not None:
            self._sink.finish(self._abort_exc)

    async def _drain(self, deadline: float) -> None:
        end = time.monotonic() + deadline
        for r in self._runners:
            r.cancel()
        for q in self._queues:
            q.close()
        self._sink.close()
        map_stages = [s for s in self._stages if isinstance(s, _MapStage)]
        for s in map_stages:
            s.close()
        await asyncio.wait(self._runners)
        tasks = [t for s in map_stages for t in s.tasks]
        if tasks:
            _, late = await asyncio.wait(tasks, timeout=max(0.0, end - time.monotonic()))
            if late:
                self._deadline_hit = True
                for t in late:
                    t.cancel()
                await asyncio.wait(late)
        abandoned = sum(s.held for s in self._stages)
        for q in self._queues:
            abandoned += sum(w for w, _ in q.drain())
        if abandoned:
            self._rec.add(items_abandoned=abandoned)
        self._close_backends(max(0.0, end - time.monotonic()))


class PipelineBuilder:
    """Fluent, single-use description of a pipeline.

    >>> p = (PipelineBuilder().add_source(range(3)).pipe(str)
    ...      .add_sink(buffer_size=2).build(num_threads=2))
    >>> with p.auto_stop():
    ...     sorted(p)
    ['0', '1', '2']
    """

    def __init__(self) -> None:
        self._source: Iterable | None = None
        self._has_source = False
        self._source_capacity = 1
        self._stages: list[StageConfig] = []
        self._sink_capacity: int | None = None
        self._built = False

    def _require_source(self) -> None:
        if not self._has_source:
            raise ConstructionError("add_source must come first")
        if self._sink_capacity is not None:
            raise ConstructionError("no stages can follow the sink")

    def add_source(self, source: Iterable, *, queue_capacity: int = 1) -> PipelineBuilder:
        if self._has_source:
            raise ConstructionError("pipeline already has a source")
        if not isinstance(queue_capacity, int) or queue_capacity < 1:
            raise ConstructionError(f"queue_capacity must be a positive integer, got {queue_capacity!r}")
        self._source = source
        self._has_source = True
        self._source_capacity = queue_capacity
        return self

    def pipe(
        self,
        func: Callable | str,
        *,
        concurrency: int = 1,
        queue_capacity: int | None = None,
        executor: ExecutorBinding | None = None,
        error_policy: str = SKIP_AND_RECORD,
        failure_abort_ratio: float | None = None,
        name: str | None = None,
    ) -> PipelineBuilder:
        self._require_source()
        executor = executor or ExecutorBinding()
        if executor.kind == SUBPROCESS:
            registry = load_registry(executor.registry)
            if isinstance(func, str):
                registry.get(func)
            else:
                func = registry.name_of(func)
        elif isinstance(func, str) or not callable(func):
            raise ConstructionError(f"stage function {func!r} is not callable")
        self._stages.append(
            StageConfig(
                MAP,
                func=func,
                concurrency=concurrency,
                queue_capacity=queue_capacity,
                executor=executor,
                error_policy=error_policy,
                failure_abort_ratio=failure_abort_ratio,
                name=name,
            )
        )
        return self

    def aggregate(
        self,
        batch_size: int,
        *,
        flush_remainder: bool = True,
        queue_capacity: int | None = None,
        name: str | None = None,
    ) -> PipelineBuilder:
        self._require_source()
        self._stages.append(
            StageConfig(
                AGGREGATE,
                batch_size=batch_size,
                flush_remainder=flush_remainder,
                queue_capacity=queue_capacity,
                name=name,
            )
        )
        return self

    def add_sink(self, buffer_size: int) -> PipelineBuilder:
        if not self._has_source:
            raise ConstructionError("add_source must come first")
        if self._sink_capacity is not None:
            raise ConstructionError("pipeline already has a sink")
        if not isinstance(buffer_size, int) or buffer_size < 1:
            raise ConstructionError(f"buffer_size must be a positive integer, got {buffer_size!r}")
        self._sink_capacity = buffer_size
        return self

    def build(self, *, num_threads: int, ordering: str = COMPLETION) -> Pipeline:
        if self._built:
            raise ConstructionError("builder already used")
        if not self._has_source or self._sink_capacity is None:
            raise ConstructionError("pipeline needs a source and a sink")
        if not isinstance(num_threads, int) or num_threads < 1:
            raise ConstructionError(f"num_threads must be a positive integer, got {num_threads!r}")
        if ordering not in (COMPLETION, FIFO):
            raise ConstructionError(f"unknown ordering {ordering!r}")
        self._built = True
        return Pipeline(
            self._source,
            self._stages,
            source_capacity=self._source_capacity,
            sink_capacity=self._sink_capacity,
            worker_count=num_threads,
            ordering=ordering,
        )
