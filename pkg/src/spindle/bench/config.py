"""Benchmark configuration and its flat ``key = value`` file format.

Example::

    # sweep the image workload over three concurrency levels
    workload = image
    corpus = /tmp/corpus/manifest.txt
    concurrency_list = 1, 2, 4
    batch_size = 32
    sample_count = 256
    executor = shared_pool, subprocess_pool

Lists are comma separated, ``none`` clears an optional field and ``#`` starts
a comment.  Every field of :class:`BenchConfig` can be set this way.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

WORKLOADS = ("image", "sleep", "fetch_image")
EXECUTORS = ("shared_pool", "dedicated_pool", "subprocess_pool")
ORDERINGS = ("completion", "fifo")


class ConfigError(ValueError):
    """Invalid benchmark configuration (a usage error)."""


@dataclass
class BenchConfig:
    workload: str = "sleep"
    corpus: str | None = None
    concurrency_list: list[int] = field(default_factory=lambda: [1, 2, 4])
    worker_count: int | None = None
    batch_size: int = 32
    sink_capacity: int = 3
    executor: list[str] = field(default_factory=lambda: ["shared_pool"])
    ordering: str = "completion"
    sample_count: int = 256
    cpu_burn: int = 0
    resize_width: int = 224
    resize_height: int = 224
    sleep_ms: float = 10.0
    fetch_latency_ms: float = 50.0
    fetch_jitter_ms: float = 0.0
    fetch_failure_rate: float = 0.0
    fetch_rate_limit: float | None = None
    # entries the source yields; defaults to sample_count
    source_size: int | None = None
    seed: int = 0
    repetitions: int = 3

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.workload not in WORKLOADS:
            raise ConfigError(f"workload must be one of {', '.join(WORKLOADS)}, got {self.workload!r}")
        if self.workload != "sleep" and not self.corpus:
            raise ConfigError(f"workload {self.workload!r} needs a corpus manifest path")
        if not self.concurrency_list or any(c < 1 for c in self.concurrency_list):
            raise ConfigError(f"concurrency_list must hold positive integers, got {self.concurrency_list}")
        if self.worker_count is not None and self.worker_count < 1:
            raise ConfigError(f"worker_count must be positive, got {self.worker_count}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.sink_capacity < 1:
            raise ConfigError(f"sink_capacity must be positive, got {self.sink_capacity}")
        bad = [e for e in self.executor if e not in EXECUTORS]
        if not self.executor or bad:
            raise ConfigError(f"executor must be drawn from {', '.join(EXECUTORS)}, got {self.executor}")
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"ordering must be one of {', '.join(ORDERINGS)}, got {self.ordering!r}")
        if self.sample_count < self.batch_size:
            raise ConfigError(
                f"sample_count ({self.sample_count}) must be at least batch_size ({self.batch_size})"
            )
        if self.repetitions < 1:
            raise ConfigError(f"repetitions must be at least 1, got {self.repetitions}")
        if self.cpu_burn < 0 or self.sleep_ms < 0:
            raise ConfigError("cpu_burn and sleep_ms must be non-negative")
        if self.resize_width < 1 or self.resize_height < 1:
            raise ConfigError("resize dimensions must be positive")
        if not 0.0 <= self.fetch_failure_rate <= 1.0:
            raise ConfigError(f"fetch_failure_rate must be in [0, 1], got {self.fetch_failure_rate}")
        if self.source_size is not None and self.source_size < 1:
            raise ConfigError(f"source_size must be positive, got {self.source_size}")

    @property
    def items(self) -> int:
        """Items a run consumes: the sample count, capped by the source size."""
        if self.source_size is None:
            return self.sample_count
        return min(self.sample_count, self.source_size)

    def threads_for(self, concurrency: int) -> int:
        return self.worker_count or concurrency

    @classmethod
    def from_text(cls, text: str) -> BenchConfig:
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            if key not in names:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = _coerce(value, hints[key])
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> BenchConfig:
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = "none"
            elif isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(value: str, hint):
    optional = False
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        optional, hint = True, args[0]
    if optional and value.lower() in ("none", ""):
        return None
    if typing.get_origin(hint) is list:
        (item,) = typing.get_args(hint)
        return [_scalar(v.strip(), item) for v in value.split(",") if v.strip()]
    return _scalar(value, hint)


def _scalar(value: str, hint):
    if hint is int:
        return int(value)
    if hint is float:
        return float(value)
    return value
