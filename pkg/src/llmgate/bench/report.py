"""Report rendering: full JSON, one-row-per-run CSV, long-form sweep CSV, text table."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Optional, Sequence, TextIO, Union

from ..metrics import MetricsSummary, RequestTimeline, RunWindow, summary_columns
from .runner import BenchmarkReport, BenchmarkRun

SCHEMA_VERSION = 1
RUN_COLUMNS = ["concurrency", "total_requests", "endpoint", "stream", "timeout_s", "interrupted", "error"]
TIMEOUT_MARK_FRACTION = 0.9


def csv_columns() -> list[str]:
    return RUN_COLUMNS + summary_columns()


def report_to_dict(rep: BenchmarkReport, include_timelines: bool = True) -> dict:
    d = {
        "run": rep.run.to_dict(),
        "summary": rep.summary.to_flat_dict() if rep.summary else None,
        "window": None if rep.window is None else {
            "t_start": rep.window.t_start, "t_end": rep.window.t_end, "n_total_tokens": rep.window.n_total_tokens,
        },
        "interrupted": rep.interrupted,
        "error": rep.error,
        "token_mismatches": rep.token_mismatches,
        "order_violations": rep.order_violations,
        "failures": rep.failures,
    }
    if include_timelines:
        d["timelines"] = [tl.to_dict() for tl in rep.timelines]
    return d


def report_from_dict(d: dict) -> BenchmarkReport:
    w = d.get("window")
    return BenchmarkReport(
        run=BenchmarkRun(**d["run"]),
        timelines=[RequestTimeline.from_dict(t) for t in d.get("timelines", [])],
        summary=MetricsSummary.from_flat_dict(d["summary"]) if d.get("summary") else None,
        window=RunWindow(**w) if w else None,
        interrupted=d.get("interrupted", False),
        error=d.get("error"),
        token_mismatches=d.get("token_mismatches", 0),
        order_violations=d.get("order_violations", 0),
        failures=d.get("failures", {}),
    )


def to_json(reports: Sequence[BenchmarkReport]) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, "runs": [report_to_dict(r) for r in reports]}, indent=1)


def from_json(text: str) -> list[BenchmarkReport]:
    data = json.loads(text)
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {data.get('schema_version')!r}")
    return [report_from_dict(r) for r in data["runs"]]


def _run_row(rep: BenchmarkReport) -> dict:
    row = {
        "concurrency": rep.run.concurrency,
        "total_requests": rep.run.total_requests,
        "endpoint": rep.run.endpoint,
        "stream": rep.run.stream,
        "timeout_s": rep.run.timeout,
        "interrupted": rep.interrupted,
        "error": rep.error or "",
    }
    if rep.summary is not None:
        row.update(rep.summary.to_flat_dict())
    return row


def to_csv(reports: Sequence[BenchmarkReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=csv_columns(), lineterminator="\n", restval="")
    w.writeheader()
    for rep in sorted(reports, key=lambda r: r.run.concurrency):
        w.writerow(_run_row(rep))
    return buf.getvalue()


def to_long_csv(reports: Sequence[BenchmarkReport]) -> str:
    """One row per (concurrency, metric)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["concurrency", "metric", "value"])
    for rep in sorted(reports, key=lambda r: r.run.concurrency):
        if rep.summary is None:
            w.writerow([rep.run.concurrency, "error", rep.error or "no data"])
            continue
        for k, v in rep.summary.to_flat_dict().items():
            w.writerow([rep.run.concurrency, k, "" if v is None else v])
    return buf.getvalue()


def _cell(summary: Optional[MetricsSummary], metric: str) -> str:
    if summary is None:
        return "n/a"
    if summary.timeout_fraction >= TIMEOUT_MARK_FRACTION:
        return "Timeout"
    st = summary.metrics.get(metric)
    return "n/a" if st is None else f"{st.mean:.1f}"


def to_table(reports: Sequence[BenchmarkReport]) -> str:
    """Concurrency x TTFT/TBT layout; a run with >= 90% timeouts prints 'Timeout'."""
    header = ["Concurrent Requests", "TTFT/ms", "TBT/ms", "Throughput tok/s", "Timed out"]
    rows = []
    for rep in sorted(reports, key=lambda r: r.run.concurrency):
        s = rep.summary
        ttft_metric = "ttft" if s is not None and s.metrics.get("ttft") is not None else "ttft_user"
        rows.append([
            str(rep.run.concurrency),
            _cell(s, ttft_metric),
            _cell(s, "tbt"),
            "n/a" if s is None else f"{s.throughput_tps:.1f}",
            "n/a" if s is None else f"{s.timeout}/{s.total}",
        ])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.rjust(w) for c, w in zip(r, widths))
    lines = [fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def emit_report(
    reports: Sequence[BenchmarkReport],
    fmt: str = "table",
    out_dir: Optional[Union[str, Path]] = None,
    stream: Optional[TextIO] = None,
) -> Optional[Path]:
    """Render ``reports`` in ``fmt``; write to ``out_dir/report.<ext>`` or to ``stream``."""
    renderers = {"json": (to_json, "json"), "csv": (to_csv, "csv"), "table": (to_table, "txt")}
    if fmt not in renderers:
        raise ValueError(f"format must be one of {sorted(renderers)}")
    render, ext = renderers[fmt]
    text = render(reports)
    if out_dir is None:
        import sys

        (stream or sys.stdout).write(text)
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"report.{ext}"
    path.write_text(text)
    return path
