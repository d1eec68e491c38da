"""Request lifecycle timelines and the latency/throughput metrics computed from them.

Instants are integer nanoseconds on one monotonic clock (``time.monotonic_ns``
on the benchmark host).  Differences stay integral; only ratios become floats.

Lifecycle instants of one request:

    t0  client submits
    t1  gateway receives
    t2  engine starts inference
    t3  engine finishes (non-streaming) / emits first token (streaming)
    t4  gateway receives first engine response
    t5  client receives first token
    t6  client receives full output
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Optional, Sequence

COMPLETED = "completed"
TIMEOUT = "timeout"
FAILED = "failed"
STATUSES = (COMPLETED, TIMEOUT, FAILED)

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


class MetricsError(ValueError):
    pass


class UndefinedTimelineError(MetricsError):
    """The metric is undefined for this timeline (not completed, or instants missing)."""


class InsufficientTokensError(MetricsError):
    pass


class DegenerateWindowError(MetricsError):
    pass


class EmptyInputError(MetricsError):
    pass


@dataclass(frozen=True)
class RequestTimeline:
    request_id: str
    t0: Optional[int] = None
    t1: Optional[int] = None
    t2: Optional[int] = None
    t3: Optional[int] = None
    t4: Optional[int] = None
    t5: Optional[int] = None
    t6: Optional[int] = None
    n_generated: int = 0
    status: str = COMPLETED

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.n_generated < 0:
            raise ValueError("n_generated must be >= 0")
        if self.status != COMPLETED:
            return
        if self.n_generated < 1:
            raise ValueError("completed timeline must have n_generated >= 1")
        present = [(name, v) for name, v in self.instants() if v is not None]
        for (a, va), (b, vb) in zip(present, present[1:]):
            if va > vb:
                raise ValueError(f"{self.request_id}: {a}={va} > {b}={vb}")

    def instants(self) -> list[tuple[str, Optional[int]]]:
        return [(f"t{i}", getattr(self, f"t{i}")) for i in range(7)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RequestTimeline":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class RunWindow:
    t_start: int
    t_end: int
    n_total_tokens: int

    def __post_init__(self) -> None:
        if self.n_total_tokens < 0:
            raise ValueError("n_total_tokens must be >= 0")


def _require(tl: RequestTimeline, *names: str) -> tuple[int, ...]:
    if tl.status != COMPLETED:
        raise UndefinedTimelineError(f"{tl.request_id}: status is {tl.status}")
    values = tuple(getattr(tl, n) for n in names)
    missing = [n for n, v in zip(names, values) if v is None]
    if missing:
        raise UndefinedTimelineError(f"{tl.request_id}: missing {', '.join(missing)}")
    return values


def average_latency(tl: RequestTimeline) -> int:
    """Time until the user sees the output, t5 - t0."""
    t0, t5 = _require(tl, "t0", "t5")
    return t5 - t0


def e2e_latency(tl: RequestTimeline) -> int:
    t0, t6 = _require(tl, "t0", "t6")
    return t6 - t0


def gateway_latency(tl: RequestTimeline) -> int:
    """Routing time in plus response transfer out: (t2 - t0) + (t5 - t3)."""
    t0, t2, t3, t5 = _require(tl, "t0", "t2", "t3", "t5")
    return (t2 - t0) + (t5 - t3)


def engine_latency(tl: RequestTimeline) -> int:
    t2, t3 = _require(tl, "t2", "t3")
    return t3 - t2


def ttft(tl: RequestTimeline) -> int:
    """Time to first token as the gateway sees it, t4 - t0."""
    t0, t4 = _require(tl, "t0", "t4")
    return t4 - t0


ttft_paper = ttft


def ttft_user(tl: RequestTimeline) -> int:
    """Time to first token as the client sees it, t5 - t0."""
    t0, t5 = _require(tl, "t0", "t5")
    return t5 - t0


def tbt(tl: RequestTimeline) -> float:
    """Mean gap between consecutive tokens after the first, in nanoseconds."""
    t5, t6 = _require(tl, "t5", "t6")
    if tl.n_generated < 2:
        raise InsufficientTokensError(f"{tl.request_id}: tbt needs >= 2 tokens, got {tl.n_generated}")
    return (t6 - t5) / (tl.n_generated - 1)


def throughput(w: RunWindow) -> float:
    """Generated tokens per second over the run window."""
    if w.t_end <= w.t_start:
        raise DegenerateWindowError(f"window end {w.t_end} <= start {w.t_start}")
    return w.n_total_tokens * NS_PER_S / (w.t_end - w.t_start)


def nearest_rank(sorted_values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile of an ascending sample."""
    if not sorted_values:
        raise EmptyInputError("percentile of empty sample")
    rank = max(1, math.ceil(p / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


# metric name -> function; order fixes the report column order
PER_REQUEST_METRICS: dict[str, Callable[[RequestTimeline], float]] = {
    "average_latency": average_latency,
    "e2e_latency": e2e_latency,
    "gateway_latency": gateway_latency,
    "engine_latency": engine_latency,
    "ttft": ttft,
    "ttft_user": ttft_user,
    "tbt": tbt,
}
STATS = ("mean", "p50", "p90", "p99")


@dataclass(frozen=True)
class MetricStats:
    mean: float
    p50: float
    p90: float
    p99: float
    count: int


def describe(values_ns: Iterable[float]) -> Optional[MetricStats]:
    """Mean and nearest-rank percentiles, converted to milliseconds."""
    xs = sorted(values_ns)
    if not xs:
        return None
    return MetricStats(
        mean=sum(xs) / len(xs) / NS_PER_MS,
        p50=nearest_rank(xs, 50) / NS_PER_MS,
        p90=nearest_rank(xs, 90) / NS_PER_MS,
        p99=nearest_rank(xs, 99) / NS_PER_MS,
        count=len(xs),
    )


@dataclass(frozen=True)
class MetricsSummary:
    total: int
    completed: int
    timeout: int
    failed: int
    timeout_fraction: float
    throughput_tps: float
    total_tokens: int
    duration_s: float
    metrics: dict[str, Optional[MetricStats]] = field(default_factory=dict)

    def to_flat_dict(self) -> dict:
        """Flat key/value view; latency fields are in milliseconds."""
        out = {
            "total": self.total,
            "completed": self.completed,
            "timeout": self.timeout,
            "failed": self.failed,
            "timeout_fraction": self.timeout_fraction,
            "throughput_tps": self.throughput_tps,
            "total_tokens": self.total_tokens,
            "duration_s": self.duration_s,
        }
        for name in PER_REQUEST_METRICS:
            st = self.metrics.get(name)
            for s in STATS:
                out[f"{name}_{s}_ms"] = None if st is None else getattr(st, s)
            out[f"{name}_count"] = 0 if st is None else st.count
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_flat_dict(), sort_keys=False)

    @classmethod
    def from_flat_dict(cls, d: dict) -> "MetricsSummary":
        metrics: dict[str, Optional[MetricStats]] = {}
        for name in PER_REQUEST_METRICS:
            count = d.get(f"{name}_count", 0)
            if not count:
                metrics[name] = None
                continue
            metrics[name] = MetricStats(
                *(d[f"{name}_{s}_ms"] for s in STATS), count=count
            )
        return cls(
            total=d["total"],
            completed=d["completed"],
            timeout=d["timeout"],
            failed=d["failed"],
            timeout_fraction=d["timeout_fraction"],
            throughput_tps=d["throughput_tps"],
            total_tokens=d["total_tokens"],
            duration_s=d["duration_s"],
            metrics=metrics,
        )


def summary_columns() -> list[str]:
    """Stable CSV column order of a flattened summary."""
    cols = [
        "total", "completed", "timeout", "failed", "timeout_fraction",
        "throughput_tps", "total_tokens", "duration_s",
    ]
    for name in PER_REQUEST_METRICS:
        cols += [f"{name}_{s}_ms" for s in STATS] + [f"{name}_count"]
    return cols


def summary_csv_row(summary: MetricsSummary, header: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=summary_columns(), lineterminator="\n")
    if header:
        writer.writeheader()
    writer.writerow(summary.to_flat_dict())
    return buf.getvalue()


def aggregate(timelines: Sequence[RequestTimeline], w: RunWindow) -> MetricsSummary:
    """Summarise one run.

    Latency statistics use completed timelines only (a metric skips timelines
    that lack the instants it needs).  Timeouts count toward the timeout
    fraction, and their partial tokens are already part of ``w.n_total_tokens``.
    """
    if not timelines:
        raise EmptyInputError("aggregate needs at least one timeline")
    counts = {s: 0 for s in STATUSES}
    for tl in timelines:
        counts[tl.status] += 1
    done = [tl for tl in timelines if tl.status == COMPLETED]

    metrics: dict[str, Optional[MetricStats]] = {}
    for name, fn in PER_REQUEST_METRICS.items():
        values = []
        for tl in done:
            try:
                values.append(fn(tl))
            except MetricsError:
                continue
        metrics[name] = describe(values)

    return MetricsSummary(
        total=len(timelines),
        completed=counts[COMPLETED],
        timeout=counts[TIMEOUT],
        failed=counts[FAILED],
        timeout_fraction=counts[TIMEOUT] / len(timelines),
        throughput_tps=throughput(w) if w.t_end > w.t_start else 0.0,
        total_tokens=w.n_total_tokens,
        duration_s=(w.t_end - w.t_start) / NS_PER_S,
        metrics=metrics,
    )


def run_window(timelines: Sequence[RequestTimeline]) -> RunWindow:
    """Window from the first submit to the last terminal instant, with all tokens generated."""
    if not timelines:
        raise EmptyInputError("run_window needs at least one timeline")
    starts = [tl.t0 for tl in timelines if tl.t0 is not None]
    ends = [
        max(v for _, v in tl.instants() if v is not None)
        for tl in timelines
        if any(v is not None for _, v in tl.instants())
    ]
    if not starts:
        raise EmptyInputError("no timeline has a submit instant")
    return RunWindow(
        t_start=min(starts),
        t_end=max(ends),
        n_total_tokens=sum(tl.n_generated for tl in timelines),
    )
