"""Stage functions for the benchmark workloads, plus their remote registry."""

from __future__ import annotations

import struct
import threading
import time
from pathlib import Path

from ..executors import RemoteFunctionRegistry
from ..media import BufferPool, ImageFrame, TransferEngine, decode_ppm, make_batch, resize_area
from ..netsim import CorpusManifest, FetchClient, FetchProfile

REGISTRY = RemoteFunctionRegistry()
REGISTRY_REF = "spindle.bench.workloads:REGISTRY"

_DIMS = struct.Struct("<HHH")


def pack_resize_request(data: bytes, width: int, height: int, cpu_burn: int = 0) -> bytes:
    """Prefix a PPM payload with the resize target for :func:`decode_resize_remote`."""
    return _DIMS.pack(width, height, cpu_burn) + data


@REGISTRY.register("identity")
def identity(data: bytes) -> bytes:
    return data


@REGISTRY.register("decode_resize")
def decode_resize_remote(data: bytes) -> bytes:
    width, height, burn = _DIMS.unpack_from(data)
    frame = decode_ppm(memoryview(data)[_DIMS.size :].tobytes(), cpu_burn=burn)
    return resize_area(frame, width, height).tobytes()


@REGISTRY.register("sleep_echo")
def sleep_echo(data: bytes) -> bytes:
    # payload: little-endian u32 milliseconds followed by the echoed bytes
    (ms,) = struct.unpack_from("<I", data)
    time.sleep(ms / 1000)
    return data[4:]


class ImageWorkload:
    """Load -> decode+resize -> batch+transfer, sharing buffer pools across batches."""

    def __init__(
        self,
        manifest: CorpusManifest,
        width: int = 224,
        height: int = 224,
        cpu_burn: int = 0,
        fetch_profile: FetchProfile | None = None,
    ) -> None:
        self.manifest = manifest
        self.width = width
        self.height = height
        self.cpu_burn = cpu_burn
        self.client = FetchClient(manifest, fetch_profile) if fetch_profile else None
        self.engine = TransferEngine()
        self._pools: dict[int, BufferPool] = {}
        self._pools_lock = threading.Lock()

    def load(self, entry: str) -> bytes:
        return (self.manifest.root / entry).read_bytes()

    def fetch(self, entry: str):
        """Deferred-completion acquisition: returns a future of the bytes."""
        return self.client.fetch(entry)

    def decode_resize(self, data: bytes) -> ImageFrame:
        frame = decode_ppm(data, cpu_burn=self.cpu_burn)
        return resize_area(frame, self.width, self.height)

    def remote_request(self, data: bytes) -> bytes:
        return pack_resize_request(data, self.width, self.height, self.cpu_burn)

    def to_frame(self, pixels: bytes) -> ImageFrame:
        return ImageFrame.from_bytes(self.width, self.height, pixels)

    def pool(self, count: int) -> BufferPool:
        with self._pools_lock:
            if count not in self._pools:
                self._pools[count] = BufferPool(count, self.height, self.width)
            return self._pools[count]

    def batch_transfer(self, frames: list[ImageFrame]):
        pool = self.pool(len(frames))
        host = make_batch(frames, pool)
        try:
            return self.engine.transfer(host)
        finally:
            host.release()

    @property
    def copies(self) -> int:
        with self._pools_lock:
            return sum(p.copies for p in self._pools.values())


def sleep_stage(ms: float):
    seconds = ms / 1000

    def sleep_for(item):
        time.sleep(seconds)
        return item

    return sleep_for


def manifest_source(manifest: CorpusManifest, count: int):
    """Lazily cycle through the manifest until ``count`` entries were produced."""
    n = len(manifest.entries)
    for i in range(count):
        yield manifest.entries[i % n]


def load_manifest(path: str | Path) -> CorpusManifest:
    return CorpusManifest.load(path)
