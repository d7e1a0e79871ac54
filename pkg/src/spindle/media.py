"""Synthetic media workload: PPM codec, area resize, copy-once batching, transfer.

Frames hold their pixels as a ``(height, width, 3)`` uint8 array.  Decoding
returns a view into the input bytes, so the only copy on the
decode -> resize -> batch path is the write into the batch buffer.
"""

from __future__ import annotations

import itertools
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

# refuse headers that would need more than this many sample bytes
MAX_SAMPLE_BYTES = 1 << 31


class DecodeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageFrame:
    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"frame dimensions must be positive, got {self.width}x{self.height}")
        p = self.pixels
        if p.dtype != np.uint8 or p.shape != (self.height, self.width, 3):
            raise ValueError(
                f"pixels must be uint8 of shape {(self.height, self.width, 3)}, got {p.dtype} {p.shape}"
            )

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes) -> ImageFrame:
        if len(data) != width * height * 3:
            raise ValueError(f"{width}x{height} frame needs {width * height * 3} bytes, got {len(data)}")
        return cls(width, height, np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3))

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageFrame):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.pixels, other.pixels)
        )

    __hash__ = None  # type: ignore[assignment]


# -- codec ---------------------------------------------------------------------


def encode_ppm(frame: ImageFrame) -> bytes:
    header = f"P6\n{frame.width} {frame.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(frame.pixels).tobytes()


_WS = b" \t\n\r\v\f"


def _header_tokens(data: bytes | memoryview, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last one.
    """
    tokens = []
    i, n = 0, len(data)
    while len(tokens) < count:
        while i < n and data[i] in _WS:
            i += 1
        if i < n and data[i] == ord("#"):
            while i < n and data[i] not in b"\r\n":
                i += 1
            continue
        start = i
        while i < n and data[i] not in _WS and data[i] != ord("#"):
            i += 1
        if start == i:
            raise DecodeError("truncated PPM header")
        tokens.append(bytes(data[start:i]))
    if i >= n:
        raise DecodeError("truncated PPM header")
    return tokens, i


def _cpu_burn(pixels: np.ndarray, passes: int) -> None:
    # extra full-frame passes that stand in for a heavier codec
    acc = np.empty(pixels.shape, dtype=np.uint16)
    for _ in range(passes):
        np.multiply(pixels, 3, out=acc, dtype=np.uint16)
        np.bitwise_xor(acc, 0x5A, out=acc)
        acc.sum(dtype=np.uint64)


def decode_ppm(data: bytes, *, cpu_burn: int = 0) -> ImageFrame:
    """Parse a binary PPM (P6, maxval 255).

    The returned frame's pixels are a read-only view into ``data``.
    """
    if len(data) < 2 or data[:2] != b"P6":
        raise DecodeError(f"bad magic {bytes(data[:2])!r}, expected b'P6'")
    tokens, end = _header_tokens(memoryview(data)[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DecodeError(f"non-numeric PPM header fields {tokens!r}") from None
    if width < 1 or height < 1:
        raise DecodeError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise DecodeError(f"unsupported maxval {maxval}, only 255 is supported")
    nbytes = width * height * 3
    if nbytes > MAX_SAMPLE_BYTES:
        raise DecodeError(f"dimensions {width}x{height} overflow the {MAX_SAMPLE_BYTES}-byte limit")
    offset = 2 + end + 1
    available = len(data) - offset
    if available < nbytes:
        raise DecodeError(f"truncated payload: {width}x{height} needs {nbytes} bytes, got {available}")
    if available > nbytes:
        raise DecodeError(f"{available - nbytes} trailing bytes after the PPM payload")
    pixels = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=offset).reshape(height, width, 3)
    if cpu_burn:
        _cpu_burn(pixels, cpu_burn)
    return ImageFrame(width, height, pixels)


# -- resize --------------------------------------------------------------------


def _box_weights(src: int, dst: int) -> np.ndarray:
    """Integer overlap of each source pixel with each output box.

    Coordinates are scaled by ``dst`` so box edges land on integers: output
    pixel ``o`` covers ``[o*src, (o+1)*src)`` and source pixel ``i`` covers
    ``[i*dst, (i+1)*dst)``.  Every row sums to ``src``.
    """
    o = np.arange(dst)[:, None]
    i = np.arange(src)[None, :]
    lo = np.maximum(o * src, i * dst)
    hi = np.minimum((o + 1) * src, (i + 1) * dst)
    return np.clip(hi - lo, 0, None).astype(np.float64)


def resize_area(frame: ImageFrame, out_w: int, out_h: int) -> ImageFrame:
    """Box-filter resize: each output sample is the mean of its source box,
    weighted by fractional coverage and rounded half up.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target dimensions must be positive, got {out_w}x{out_h}")
    if (out_w, out_h) == (frame.width, frame.height):
        return frame
    wy = _box_weights(frame.height, out_h)
    wx = _box_weights(frame.width, out_w)
    # weighted sums are integers below 2**53, so float64 matmul is exact
    src = frame.pixels.astype(np.float64)
    rows = np.einsum("oh,hwc->owc", wy, src, optimize=True)
    sums = np.einsum("pw,owc->opc", wx, rows, optimize=True).astype(np.int64)
    total = frame.width * frame.height
    out = (2 * sums + total) // (2 * total)
    return ImageFrame(out_w, out_h, out.astype(np.uint8))


# -- batching ------------------------------------------------------------------

FRESH = "fresh"
REUSED = "reused"


class BatchBuffer:
    """Contiguous ``(count, height, width, 3)`` block that frames are copied into."""

    def __init__(self, count: int, height: int, width: int, pool: BufferPool | None = None) -> None:
        self.shape = (count, height, width, 3)
        self.data = bytearray(count * height * width * 3)
        self.array = np.frombuffer(self.data, dtype=np.uint8).reshape(self.shape)
        self.filled = 0
        self.origin = FRESH
        self._pool = pool

    @property
    def count(self) -> int:
        return self.shape[0]

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def release(self) -> None:
        """Hand the buffer back to the pool it came from."""
        if self._pool is not None:
            self._pool.release(self)


class BufferPool:
    """Free list of equally shaped batch buffers.

    A buffer belongs to the pool while it sits on the free list and to the
    caller between ``acquire`` and ``release``.  ``copies`` counts frame copies
    made by :func:`make_batch` into buffers of this pool.
    """

    def __init__(self, count: int, height: int, width: int) -> None:
        if min(count, height, width) < 1:
            raise ValueError(f"pool shape must be positive, got {(count, height, width)}")
        self.shape = (count, height, width, 3)
        self._free: deque[BatchBuffer] = deque()
        self._lock = threading.Lock()
        self._out: set[int] = set()
        self.allocated = 0
        self.high_water = 0
        self.copies = 0

    @property
    def outstanding(self) -> int:
        with self._lock:
            return len(self._out)

    def acquire(self) -> BatchBuffer:
        with self._lock:
            if self._free:
                buf = self._free.popleft()
                buf.origin = REUSED
            else:
                buf = BatchBuffer(*self.shape[:3], pool=self)
                self.allocated += 1
            buf.filled = 0
            self._out.add(id(buf))
            self.high_water = max(self.high_water, len(self._out))
            return buf

    def release(self, buf: BatchBuffer) -> None:
        with self._lock:
            if id(buf) not in self._out:
                raise ValueError("buffer is not checked out of this pool")
            self._out.discard(id(buf))
            self._free.append(buf)

    def _count_copy(self) -> None:
        with self._lock:
            self.copies += 1


def make_batch(frames: list[ImageFrame], pool: BufferPool) -> BatchBuffer:
    count, height, width, _ = pool.shape
    if len(frames) != count:
        raise ValueError(f"pool batches hold {count} frames, got {len(frames)}")
    for i, f in enumerate(frames):
        if (f.width, f.height) != (width, height):
            raise ValueError(f"frame at index {i} is {f.width}x{f.height}, expected {width}x{height}")
    buf = pool.acquire()
    for i, f in enumerate(frames):
        buf.array[i] = f.pixels
        buf.filled += 1
        pool._count_copy()
    return buf


# -- device transfer stub ------------------------------------------------------


@dataclass(frozen=True)
class DeviceBatch:
    data: bytes
    shape: tuple[int, int, int, int]
    transfer_seq: int


class TransferEngine:
    """Copies host batches into a stand-in device arena, one at a time."""

    def __init__(self) -> None:
        self._gate = threading.Lock()
        self._stats_lock = threading.Lock()
        self._seq = itertools.count(1)
        self.in_flight = 0
        self.max_in_flight = 0
        self.transfers = 0

    def transfer(self, batch: BatchBuffer) -> DeviceBatch:
        if batch.filled != batch.count:
            raise ValueError(f"batch holds {batch.filled} of {batch.count} frames")
        with self._gate:
            with self._stats_lock:
                self.in_flight += 1
                self.max_in_flight = max(self.max_in_flight, self.in_flight)
            try:
                out = DeviceBatch(bytes(batch.data), batch.shape, next(self._seq))
                self.transfers += 1
            finally:
                with self._stats_lock:
                    self.in_flight -= 1
        return out


_default_engine = TransferEngine()


def default_transfer_engine() -> TransferEngine:
    return _default_engine


def transfer(batch: BatchBuffer) -> DeviceBatch:
    """Single-flight transfer through the process-wide engine."""
    return _default_engine.transfer(batch)
