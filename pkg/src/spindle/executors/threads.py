"""Thread pool backing the shared and dedicated executor bindings."""

from __future__ import annotations

import itertools
import queue
import threading
import time
from collections.abc import Callable
from concurrent.futures import Future
from typing import Any


class ExecutorShutdown(RuntimeError):
    """Submission to an executor that has been shut down."""


_pool_ids = itertools.count()


class WorkerPool:
    """Fixed-ceiling thread pool whose threads are daemonic.

    Threads are created on demand, only when no idle thread is available, up to
    ``max_workers``.  Daemon threads keep a wedged stage function from holding
    the interpreter open at exit; ``shutdown`` reports such stragglers instead
    of blocking on them.
    """

    def __init__(self, max_workers: int, name: str | None = None) -> None:
        if max_workers < 1:
            raise ValueError(f"max_workers must be >= 1, got {max_workers}")
        self.max_workers = max_workers
        self.name = name or f"spindle-pool-{next(_pool_ids)}"
        self._work: queue.SimpleQueue = queue.SimpleQueue()
        self._idle = threading.Semaphore(0)
        self._lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._closed = False

    def submit(self, fn: Callable[..., Any], *args: Any) -> Future:
        with self._lock:
            if self._closed:
                raise ExecutorShutdown(f"{self.name} is shut down")
            fut: Future = Future()
            self._work.put((fut, fn, args))
            if not self._idle.acquire(blocking=False) and len(self._threads) < self.max_workers:
                t = threading.Thread(
                    target=self._run, name=f"{self.name}-{len(self._threads)}", daemon=True
                )
                t.start()
                self._threads.append(t)
        return fut

    def _run(self) -> None:
        while True:
            item = self._work.get()
            if item is None:
                return
            fut, fn, args = item
            del item
            if fut.set_running_or_notify_cancel():
                try:
                    result = fn(*args)
                except BaseException as e:
                    fut.set_exception(e)
                else:
                    fut.set_result(result)
            del fut, fn, args
            self._idle.release()

    @property
    def threads(self) -> list[threading.Thread]:
        return list(self._threads)

    def live_threads(self) -> list[threading.Thread]:
        return [t for t in self._threads if t.is_alive()]

    def shutdown(self, wait: bool = True, timeout: float | None = None) -> list[threading.Thread]:
        """Cancel queued work and stop the threads.

        Returns the threads still alive when the call gives up waiting; with
        ``wait=False`` that is every thread still running a task.
        """
        with self._lock:
            self._closed = True
            while True:
                try:
                    item = self._work.get_nowait()
                except queue.Empty:
                    break
                if item is not None:
                    item[0].cancel()
            for _ in self._threads:
                self._work.put(None)
        if wait:
            end = None if timeout is None else time.monotonic() + timeout
            for t in self._threads:
                t.join(None if end is None else max(0.0, end - time.monotonic()))
        return self.live_threads()
