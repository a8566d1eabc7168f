"""CSV and JSON reports of simulation metrics."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from ..core import FaasError
from .simulator import SimMetrics

CSV_COLUMNS = ["scenario", "core_utilization", "memory_utilization", "functions_completed",
               "functions_rejected", "batch_core_hours_billed"]


class ReportIOError(FaasError):
    code = "io-error"


def to_csv(metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for m in metrics:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(m, c) for c in CSV_COLUMNS)])
    return buf.getvalue()


def to_json(metrics) -> str:
    return json.dumps([m.to_dict() for m in metrics], indent=2, sort_keys=True) + "\n"


def from_json(text: str) -> list:
    return [SimMetrics.from_dict(d) for d in json.loads(text)]


def report(metrics, fmt: str, path) -> Path:
    """Write ``metrics`` (one SimMetrics or a list) as "csv" or "json" to ``path``."""
    if isinstance(metrics, SimMetrics):
        metrics = [metrics]
    if fmt == "csv":
        text = to_csv(metrics)
    elif fmt == "json":
        text = to_json(metrics)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc}") from None
    return path


def write_reports(metrics, out_dir) -> tuple:
    out = Path(out_dir)
    return report(metrics, "csv", out / "metrics.csv"), report(metrics, "json", out / "metrics.json")
