"""Metric snapshots and CSV output.

CSV layout: one ``# daqflow`` comment line carrying the experiment name,
config digest and the full config as JSON (enough to rerun the point), then
a header row, then one row per sweep point. Floats are written with 9
significant digits so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

MIN_RATE_SAMPLES = 100


@dataclass
class MetricsSnapshot:
    columns: tuple[str, ...] = ()
    rows: list[tuple[Any, ...]] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Sequence[dict[str, Any]], meta: dict[str, Any] | None = None,
                     columns: Sequence[str] | None = None) -> MetricsSnapshot:
        if columns is None:
            columns = list(records[0]) if records else []
        rows = [tuple(r.get(c) for c in columns) for r in records]
        return cls(tuple(columns), rows, dict(meta or {}))

    def records(self) -> list[dict[str, Any]]:
        return [dict(zip(self.columns, r)) for r in self.rows]

    def column(self, name: str) -> list[Any]:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.9g}"
    return str(v)


def format_csv(snapshot: MetricsSnapshot) -> str:
    buf = io.StringIO()
    if snapshot.meta:
        buf.write("# daqflow " + json.dumps(snapshot.meta, sort_keys=True, separators=(",", ":")) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(snapshot.columns)
    for row in snapshot.rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def emit_metrics_csv(snapshot: MetricsSnapshot, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_csv(snapshot))


def read_csv_meta(path: str | Path) -> dict[str, Any]:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("# daqflow "):
        raise ValueError(f"{path}: no daqflow comment line")
    return json.loads(first[len("# daqflow "):])


def read_csv_rows(path: str | Path) -> list[dict[str, str]]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def summarize(values: Iterable[float], prefix: str) -> dict[str, float]:
    vals = sorted(values)
    if not vals:
        return {f"{prefix}_n": 0, f"{prefix}_mean": math.nan, f"{prefix}_p95": math.nan, f"{prefix}_max": math.nan}
    # nearest-rank percentile
    p95 = vals[max(0, math.ceil(0.95 * len(vals)) - 1)]
    return {
        f"{prefix}_n": len(vals),
        f"{prefix}_mean": sum(vals) / len(vals),
        f"{prefix}_p95": float(p95),
        f"{prefix}_max": float(vals[-1]),
    }


def window_rate(times_us: Sequence[int], t0: int, t1: int) -> float:
    """Events per second with timestamps in [t0, t1); NaN below the sample floor."""
    if t1 <= t0:
        return math.nan
    n = sum(1 for t in times_us if t0 <= t < t1)
    if n < MIN_RATE_SAMPLES:
        return math.nan
    return n * 1e6 / (t1 - t0)
