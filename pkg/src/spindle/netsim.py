"""Deterministic stand-in for a remote object store.

``FetchClient.fetch`` returns a future that completes after a simulated
network delay.  The delay runs on a shared timer thread, so a pipeline stage
calling ``fetch`` gives its pool worker back immediately.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import threading
import time
from collections import deque
from collections.abc import Callable
from concurrent.futures import Future
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .media import ImageFrame, decode_ppm, encode_ppm

MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class FetchProfile:
    base_latency: float = 0.05
    jitter: float = 0.0
    failure_rate: float = 0.0
    rate_limit: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.base_latency < 0 or self.jitter < 0:
            raise ValueError("latency and jitter must be non-negative")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError(f"failure_rate must be in [0, 1], got {self.failure_rate}")
        if self.rate_limit is not None and self.rate_limit <= 0:
            raise ValueError(f"rate_limit must be positive, got {self.rate_limit}")
        if not 0 <= self.seed < 1 << 64:
            raise ValueError("seed must fit in 64 bits")

    def outcome(self, ordinal: int) -> tuple[float, bool]:
        """Delay in seconds and whether request ``ordinal`` fails.

        Derived from a hash of (seed, ordinal) so the answer does not depend on
        which thread asks first.
        """
        h = hashlib.blake2b(
            self.seed.to_bytes(8, "little") + ordinal.to_bytes(8, "little"), digest_size=16
        ).digest()
        u_fail = int.from_bytes(h[:8], "little") / 2**64
        u_delay = int.from_bytes(h[8:], "little") / 2**64
        delay = max(0.0, self.base_latency + self.jitter * (2.0 * u_delay - 1.0))
        return delay, u_fail < self.failure_rate


class FetchError(Exception):
    def __init__(self, ordinal: int, entry: str) -> None:
        super().__init__(f"simulated fetch failure for request {ordinal} ({entry})")
        self.ordinal = ordinal
        self.entry = entry


@dataclass
class CorpusManifest:
    root: Path
    entries: list[str]
    width: int
    height: int
    seed: int | None = None

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def __len__(self) -> int:
        return len(self.entries)

    def index(self, entry: str) -> int:
        try:
            return self._index[entry]
        except AttributeError:
            self._index = {e: i for i, e in enumerate(self.entries)}
            return self._index[entry]

    def write(self) -> Path:
        self.path.write_text("".join(e + "\n" for e in self.entries))
        return self.path

    @classmethod
    def load(cls, path: str | Path) -> CorpusManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        entries = [line.strip() for line in path.read_text().splitlines() if line.strip()]
        if not entries:
            raise ValueError(f"manifest {path} lists no files")
        first = decode_ppm((path.parent / entries[0]).read_bytes())
        return cls(path.parent, entries, first.width, first.height)


def synth_frame(width: int, height: int, seed: int, index: int) -> ImageFrame:
    rng = np.random.default_rng([seed, index])
    return ImageFrame(width, height, rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


def gen_corpus(root: str | Path, n: int, width: int, height: int, seed: int = 0) -> CorpusManifest:
    """Write ``n`` pseudo-random PPM files and their manifest under ``root``.

    The same arguments always produce byte-identical files.
    """
    if n < 1:
        raise ValueError(f"corpus needs at least one file, got n={n}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    digits = max(6, len(str(n - 1)))
    entries = []
    for i in range(n):
        rel = f"images/{i:0{digits}d}.ppm"
        (root / rel).write_bytes(encode_ppm(synth_frame(width, height, seed, i)))
        entries.append(rel)
    manifest = CorpusManifest(root, entries, width, height, seed)
    manifest.write()
    return manifest


class RateLimiter:
    """Admits at most ``rate`` requests in any window of one second.

    ``reserve`` never blocks: it books the earliest admissible time and
    returns it, so callers can delay completion without holding a thread.
    Bursts up to ``rate`` are admitted at once, then admissions are spaced so
    that the ``rate``-th previous admission is at least one second older.
    """

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic) -> None:
        if rate <= 0:
            raise ValueError(f"rate must be positive, got {rate}")
        self.limit = max(1, int(rate))
        self._clock = clock
        self._lock = threading.Lock()
        self._admitted: deque[float] = deque()

    def reserve(self) -> float:
        with self._lock:
            # _admitted holds the last `limit` bookings in time order
            at = self._clock()
            if self._admitted:
                at = max(at, self._admitted[-1])
            if len(self._admitted) == self.limit:
                at = max(at, self._admitted.popleft() + 1.0)
            self._admitted.append(at)
            return at


class TimerService:
    """One daemon thread firing callbacks at monotonic deadlines."""

    def __init__(self, name: str = "netsim-timer") -> None:
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._cond = threading.Condition()
        self._ids = itertools.count()
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()

    def call_at(self, when: float, fn: Callable[[], None]) -> None:
        with self._cond:
            heapq.heappush(self._heap, (when, next(self._ids), fn))
            self._cond.notify()

    def _run(self) -> None:
        while True:
            with self._cond:
                while not self._heap:
                    self._cond.wait()
                when, _, fn = self._heap[0]
                delay = when - time.monotonic()
                if delay > 0:
                    self._cond.wait(delay)
                    continue
                heapq.heappop(self._heap)
            fn()


_timer: TimerService | None = None
_timer_lock = threading.Lock()


def _shared_timer() -> TimerService:
    global _timer
    with _timer_lock:
        if _timer is None:
            _timer = TimerService()
        return _timer


class FetchClient:
    """Serves corpus files as if they came over a slow, flaky network."""

    def __init__(self, manifest: CorpusManifest, profile: FetchProfile | None = None) -> None:
        self.manifest = manifest
        self.profile = profile or FetchProfile()
        self.limiter = RateLimiter(self.profile.rate_limit) if self.profile.rate_limit else None
        self._timer = _shared_timer()
        self._lock = threading.Lock()
        self.admissions: list[float] = []

    def fetch(self, entry: str, ordinal: int | None = None) -> Future:
        """Future of the entry's bytes, or of :class:`FetchError`.

        ``ordinal`` defaults to the entry's position in the manifest, which
        fixes its delay and failure outcome independent of call order.
        """
        try:
            idx = self.manifest.index(entry)
        except KeyError:
            raise KeyError(f"{entry!r} is not in the manifest") from None
        ordinal = idx if ordinal is None else ordinal
        delay, fails = self.profile.outcome(ordinal)
        now = time.monotonic()
        admit = self.limiter.reserve() if self.limiter else now
        with self._lock:
            self.admissions.append(admit)
        fut: Future = Future()
        if fails:
            result: bytes | FetchError = FetchError(ordinal, entry)
        else:
            result = (self.manifest.root / entry).read_bytes()

        def complete() -> None:
            if not fut.set_running_or_notify_cancel():
                return
            if isinstance(result, FetchError):
                fut.set_exception(result)
            else:
                fut.set_result(result)

        self._timer.call_at(admit + delay, complete)
        return fut

    def fetch_blocking(self, entry: str, ordinal: int | None = None) -> bytes:
        return self.fetch(entry, ordinal).result()
