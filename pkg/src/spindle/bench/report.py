"""CSV and JSON output for benchmark reports.

CSV columns, in order (one header row, then one row per run)::

    workload, executor, ordering, concurrency, repetition, worker_count,
    batch_size, items, batches, failed, wall_us, ttfb_us, throughput,
    throughput_adjusted, per_item_us, peak_rss_bytes, cpu_user_s,
    cpu_system_s, bottleneck

``throughput`` is items per second over the whole run; ``throughput_adjusted``
leaves out the first batch and the time spent waiting for it.  The JSON form
is an array of row objects with the same keys plus ``stats``, the pipeline
telemetry snapshot.  Rows are ordered by (workload, concurrency, repetition,
executor) so repeated emissions are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from pathlib import Path

from .runner import BenchReport, BenchRow

CSV_COLUMNS = [f.name for f in dataclasses.fields(BenchRow) if f.name != "stats"]
FORMATS = ("csv", "json")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def render(report: BenchReport, fmt: str) -> str:
    rows = report.sorted_rows()
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()
    if fmt == "json":
        return json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True) + "\n"
    raise ValueError(f"format must be one of {', '.join(FORMATS)}, got {fmt!r}")


def emit_report(report: BenchReport, fmt: str, path: str | Path) -> Path:
    """Write ``report`` to ``path``; raises OSError if the path is not writable."""
    text = render(report, fmt)
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def load_report(path: str | Path) -> BenchReport:
    """Read a JSON report written by :func:`emit_report`."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ValueError(f"{path}: expected a JSON array of rows")
    return BenchReport([BenchRow.from_dict(d) for d in data])
