"""Pool of Python subprocess workers driven over framed stdin/stdout pipes."""

from __future__ import annotations

import itertools
import json
import logging
import os
import subprocess
import sys
import threading
import time
from collections import deque
from collections.abc import Callable
from concurrent.futures import Future
from dataclasses import dataclass, field

from .registry import load_registry
from .threads import ExecutorShutdown
from .wire import (
    PROTOCOL_VERSION,
    Opcode,
    ProtocolError,
    WireFrame,
    encode_frame,
    pack_call,
    read_frame,
)

log = logging.getLogger(__name__)


class HandshakeError(RuntimeError):
    """A worker failed to start or disagrees with the parent's registry."""


class RemoteError(RuntimeError):
    """The worker answered a call with an error frame."""


class WorkerCrashed(RuntimeError):
    """The worker running a task died before answering."""


@dataclass
class ShutdownStatus:
    exit_codes: list[int | None] = field(default_factory=list)
    killed: list[int] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.killed and all(code == 0 for code in self.exit_codes)


class _Worker:
    def __init__(self, proc: subprocess.Popen) -> None:
        self.proc = proc
        self.task: tuple[int, Future] | None = None
        self.reader: threading.Thread | None = None

    @property
    def pid(self) -> int:
        return self.proc.pid


class SubprocessPool:
    """Run registered ``bytes -> bytes`` functions in worker processes.

    All workers are launched before any handshake is awaited, so startup costs
    roughly one interpreter launch regardless of pool size.  A crashed worker
    fails its current task and is replaced; tasks are never retried.

    ``frames_encoded`` and ``frames_decoded`` count call payload serializations
    and result deserializations in the parent, one each per remote call.
    """

    def __init__(
        self,
        size: int,
        registry: str,
        *,
        name: str | None = None,
        init_delay: float = 0.0,
        env: dict[str, str] | None = None,
        startup_timeout: float = 60.0,
    ) -> None:
        if size < 1:
            raise ValueError(f"subprocess pool size must be >= 1, got {size}")
        self.size = size
        self.registry_ref = registry
        self.registry = load_registry(registry)
        self.name = name or f"subprocess-pool({size})"
        self.init_delay = init_delay
        self.startup_timeout = startup_timeout
        self._env = env
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._workers: list[_Worker] = []
        self._idle: deque[_Worker] = deque()
        self._pending: deque[tuple[int, str, bytes, Future]] = deque()
        self._started = False
        self._closed = False
        self.frames_encoded = 0
        self.frames_decoded = 0
        self.respawns = 0

    # -- lifecycle ---------------------------------------------------------

    def _command(self) -> list[str]:
        cmd = [sys.executable, "-m", "spindle.executors._worker", self.registry_ref]
        if self.init_delay:
            cmd += ["--init-delay", repr(self.init_delay)]
        return cmd

    def _environment(self) -> dict[str, str]:
        env = dict(os.environ)
        paths = [p for p in sys.path if p and os.path.isdir(p)]
        if env.get("PYTHONPATH"):
            paths.append(env["PYTHONPATH"])
        env["PYTHONPATH"] = os.pathsep.join(paths)
        if self._env:
            env.update(self._env)
        return env

    def _launch(self) -> _Worker:
        proc = subprocess.Popen(
            self._command(),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            env=self._environment(),
        )
        return _Worker(proc)

    def _handshake(self, w: _Worker) -> None:
        result: list = []

        def read() -> None:
            try:
                result.append(read_frame(w.proc.stdout))
            except ProtocolError as e:
                result.append(e)

        t = threading.Thread(target=read, daemon=True)
        t.start()
        t.join(self.startup_timeout)
        frame = result[0] if result else None
        if isinstance(frame, Exception) or frame is None:
            raise HandshakeError(f"worker {w.pid} exited or timed out before its handshake")
        if frame.opcode != Opcode.RESULT or frame.task_id != 0:
            raise HandshakeError(f"worker {w.pid} sent {frame.opcode.name} instead of a handshake")
        hello = json.loads(frame.payload)
        if hello.get("protocol") != PROTOCOL_VERSION:
            raise HandshakeError(
                f"worker {w.pid} speaks protocol {hello.get('protocol')}, expected {PROTOCOL_VERSION}"
            )
        if hello.get("digest") != self.registry.digest():
            raise HandshakeError(
                f"worker {w.pid} registry digest {hello.get('digest')} does not match "
                f"parent digest {self.registry.digest()}"
            )

    def _attach(self, w: _Worker) -> None:
        w.reader = threading.Thread(
            target=self._read_loop, args=(w,), name=f"{self.name}-reader-{w.pid}", daemon=True
        )
        w.reader.start()

    def start(self) -> None:
        with self._lock:
            if self._started:
                raise RuntimeError(f"{self.name} already started")
            self._started = True
        workers = [self._launch() for _ in range(self.size)]
        try:
            for w in workers:
                self._handshake(w)
        except BaseException:
            for w in workers:
                w.proc.kill()
                w.proc.wait()
            with self._lock:
                self._closed = True
            raise
        with self._lock:
            self._workers = workers
            self._idle.extend(workers)
        for w in workers:
            self._attach(w)

    def shutdown(self, deadline: float = 1.0) -> ShutdownStatus:
        """Ask every worker to exit; kill those still running after ``deadline``."""
        with self._lock:
            self._closed = True
            pending = list(self._pending)
            self._pending.clear()
            workers = list(self._workers)
        for _, _, _, fut in pending:
            if fut.set_running_or_notify_cancel():
                fut.set_exception(ExecutorShutdown(f"{self.name} shut down"))
        shutdown_frame = encode_frame(WireFrame(Opcode.SHUTDOWN, 0))
        for w in workers:
            try:
                w.proc.stdin.write(shutdown_frame)
                w.proc.stdin.flush()
                w.proc.stdin.close()
            except (BrokenPipeError, OSError, ValueError):
                pass
        status = ShutdownStatus()
        end = time.monotonic() + deadline
        for w in workers:
            try:
                code = w.proc.wait(max(0.0, end - time.monotonic()))
            except subprocess.TimeoutExpired:
                w.proc.kill()
                code = w.proc.wait()
                status.killed.append(w.pid)
            status.exit_codes.append(code)
        for w in workers:
            if w.reader is not None:
                w.reader.join(1.0)
            self._fail_current(w, ExecutorShutdown(f"{self.name} shut down"))
        return status

    @property
    def pids(self) -> list[int]:
        with self._lock:
            return [w.pid for w in self._workers]

    # -- calls ---------------------------------------------------------------

    def submit(self, func: str | Callable, payload: bytes) -> Future:
        """Queue a call; the returned future resolves to the result bytes."""
        name = func if isinstance(func, str) else self.registry.name_of(func)
        fut: Future = Future()
        with self._lock:
            if self._closed or not self._started:
                raise ExecutorShutdown(f"{self.name} is not running")
            self._pending.append((next(self._ids), name, payload, fut))
            w = self._idle.popleft() if self._idle else None
        if w is not None:
            self._dispatch(w)
        return fut

    def remote_call(self, func: str | Callable, payload: bytes, timeout: float | None = None) -> bytes:
        return self.submit(func, payload).result(timeout)

    def _dispatch(self, w: _Worker) -> None:
        """Hand the next pending call to idle worker ``w`` or park it."""
        while True:
            with self._lock:
                if not self._pending or self._closed:
                    self._idle.append(w)
                    return
                task_id, name, payload, fut = self._pending.popleft()
                if not fut.set_running_or_notify_cancel():
                    continue
                w.task = (task_id, fut)
                frame = encode_frame(WireFrame(Opcode.CALL, task_id, pack_call(name, payload)))
                self.frames_encoded += 1
            try:
                w.proc.stdin.write(frame)
                w.proc.stdin.flush()
            except (BrokenPipeError, OSError, ValueError):
                # the reader thread sees EOF and reports the crash
                pass
            return

    def _fail_current(self, w: _Worker, exc: BaseException) -> None:
        with self._lock:
            task, w.task = w.task, None
        if task is not None and not task[1].done():
            task[1].set_exception(exc)

    def _read_loop(self, w: _Worker) -> None:
        while True:
            try:
                frame = read_frame(w.proc.stdout)
            except ProtocolError as e:
                log.error("%s: worker %d protocol error: %s", self.name, w.pid, e)
                frame = None
            if frame is None:
                break
            with self._lock:
                task = w.task
            if task is None or frame.task_id != task[0]:
                log.error("%s: worker %d answered unknown task %d", self.name, w.pid, frame.task_id)
                continue
            with self._lock:
                w.task = None
                self.frames_decoded += 1
            fut = task[1]
            if frame.opcode == Opcode.RESULT:
                fut.set_result(frame.payload)
            elif frame.opcode == Opcode.ERROR:
                fut.set_exception(RemoteError(frame.payload.decode(errors="replace")))
            else:
                fut.set_exception(ProtocolError(f"unexpected {frame.opcode.name} frame"))
            self._dispatch(w)
        self._on_worker_exit(w)

    def _on_worker_exit(self, w: _Worker) -> None:
        code = w.proc.wait()
        with self._lock:
            closed = self._closed
        if closed:
            self._fail_current(w, ExecutorShutdown(f"{self.name} shut down"))
            return
        self._fail_current(w, WorkerCrashed(f"worker {w.pid} exited with code {code}"))
        with self._lock:
            try:
                self._idle.remove(w)
            except ValueError:
                pass
        log.warning("%s: worker %d died (exit %s), respawning", self.name, w.pid, code)
        replacement = self._launch()
        try:
            self._handshake(replacement)
        except HandshakeError:
            log.exception("%s: replacement worker failed to start", self.name)
            replacement.proc.kill()
            replacement.proc.wait()
            return
        with self._lock:
            if self._closed:
                replacement.proc.kill()
                replacement.proc.wait()
                return
            self._workers[self._workers.index(w)] = replacement
            self.respawns += 1
        self._attach(replacement)
        self._dispatch(replacement)
