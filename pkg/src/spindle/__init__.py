"""Staged, backpressured data-loading pipelines."""

from .executors import ExecutorBinding, dedicated_pool, shared_pool, subprocess_pool
from .pipeline import (
    COMPLETION,
    FAIL_FAST,
    FIFO,
    SKIP_AND_RECORD,
    ConstructionError,
    EndOfStream,
    Pipeline,
    PipelineAborted,
    PipelineBuilder,
    PipelineError,
    StageConfig,
    StopReport,
    TimedOut,
)
from .telemetry import PipelineStats, StageStats, bottleneck_hint

__all__ = [
    "COMPLETION",
    "FAIL_FAST",
    "FIFO",
    "SKIP_AND_RECORD",
    "ConstructionError",
    "EndOfStream",
    "ExecutorBinding",
    "Pipeline",
    "PipelineAborted",
    "PipelineBuilder",
    "PipelineError",
    "PipelineStats",
    "StageConfig",
    "StageStats",
    "StopReport",
    "TimedOut",
    "bottleneck_hint",
    "dedicated_pool",
    "shared_pool",
    "subprocess_pool",
]
