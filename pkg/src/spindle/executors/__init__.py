"""Execution backends that pipeline stages are bound to."""

from __future__ import annotations

from dataclasses import dataclass

from .registry import RemoteFunctionRegistry, load_registry
from .subprocess_pool import (
    HandshakeError,
    RemoteError,
    ShutdownStatus,
    SubprocessPool,
    WorkerCrashed,
)
from .threads import ExecutorShutdown, WorkerPool
from .wire import Opcode, ProtocolError, WireFrame, decode_frame, encode_frame

SHARED = "shared_pool"
DEDICATED = "dedicated_pool"
SUBPROCESS = "subprocess_pool"


@dataclass(frozen=True)
class ExecutorBinding:
    """Where a stage's tasks run.

    ``shared_pool`` is the pipeline-wide thread pool sized by ``build``;
    ``dedicated_pool`` gives the stage its own threads; ``subprocess_pool``
    runs functions from ``registry`` in worker processes.
    """

    kind: str = SHARED
    size: int | None = None
    registry: str | None = None
    name: str | None = None
    init_delay: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in (SHARED, DEDICATED, SUBPROCESS):
            raise ValueError(f"unknown executor kind {self.kind!r}")
        if self.kind != SHARED and (self.size is None or self.size < 1):
            raise ValueError(f"{self.kind} needs size >= 1, got {self.size}")
        if self.kind == SUBPROCESS and not self.registry:
            raise ValueError("subprocess_pool needs a registry reference 'module:attribute'")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return self.kind if self.kind == SHARED else f"{self.kind}({self.size})"


def shared_pool() -> ExecutorBinding:
    return ExecutorBinding(SHARED)


def dedicated_pool(size: int, name: str | None = None) -> ExecutorBinding:
    return ExecutorBinding(DEDICATED, size=size, name=name)


def subprocess_pool(
    size: int, registry: str, name: str | None = None, init_delay: float = 0.0
) -> ExecutorBinding:
    return ExecutorBinding(SUBPROCESS, size=size, registry=registry, name=name, init_delay=init_delay)


__all__ = [
    "DEDICATED",
    "SHARED",
    "SUBPROCESS",
    "ExecutorBinding",
    "ExecutorShutdown",
    "HandshakeError",
    "Opcode",
    "ProtocolError",
    "RemoteError",
    "RemoteFunctionRegistry",
    "ShutdownStatus",
    "SubprocessPool",
    "WireFrame",
    "WorkerCrashed",
    "WorkerPool",
    "dedicated_pool",
    "decode_frame",
    "encode_frame",
    "load_registry",
    "shared_pool",
    "subprocess_pool",
]
