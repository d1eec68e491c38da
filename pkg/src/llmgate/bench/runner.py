"""Closed-loop load generation against an OpenAI-compatible endpoint or the simulator."""

from __future__ import annotations

import asyncio
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import aiohttp

from ..engine.calibration import dynamic_topology, standard_topologies
from ..engine.cluster import simulate_closed_loop
from ..engine.model import SimRequest
from ..engine.scheduler import sampled_length
from ..metrics import (
    COMPLETED,
    FAILED,
    TIMEOUT,
    MetricsSummary,
    RequestTimeline,
    RunWindow,
    aggregate,
)
from ..topology import Topology, load_topology
from .dataset import PromptRecord, load_dataset, synthetic_dataset

log = logging.getLogger(__name__)

SIM_SCHEME = "sim://"


class BenchError(Exception):
    pass


class EndpointUnreachableError(BenchError):
    pass


@dataclass
class BenchmarkRun:
    concurrency: int
    endpoint: str
    total_requests: Optional[int] = None
    dataset: Optional[str] = None
    api_key: Optional[str] = None
    timeout: float = 60.0
    stream: bool = True
    seed: int = 0
    max_tokens: int = 512
    temperature: float = 0.5
    top_p: float = 0.7
    model: str = "llmgate-sim"
    min_output_tokens: Optional[int] = None

    def __post_init__(self) -> None:
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.total_requests is None:
            self.total_requests = 20 * self.concurrency
        if self.total_requests < 0:
            raise ValueError("total_requests must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("api_key", None)
        return d


@dataclass
class BenchmarkReport:
    run: BenchmarkRun
    timelines: list[RequestTimeline]
    summary: Optional[MetricsSummary]
    window: Optional[RunWindow] = None
    events: list[tuple[int, int]] = field(default_factory=list)
    interrupted: bool = False
    error: Optional[str] = None
    token_mismatches: int = 0
    order_violations: int = 0
    failures: dict[str, int] = field(default_factory=dict)

    @property
    def concurrency(self) -> int:
        return self.run.concurrency

    def counts(self) -> dict[str, int]:
        out = {COMPLETED: 0, TIMEOUT: 0, FAILED: 0}
        for tl in self.timelines:
            out[tl.status] += 1
        return out

    def max_observed_inflight(self) -> int:
        """Peak in-flight count replayed from the submission/completion log."""
        cur = peak = 0
        for _, delta in sorted(self.events, key=lambda e: (e[0], e[1])):
            cur += delta
            peak = max(peak, cur)
        return peak


def _records_for(run: BenchmarkRun) -> list[PromptRecord]:
    if run.dataset:
        recs = load_dataset(run.dataset, run.total_requests, run.seed)
    else:
        recs = synthetic_dataset(max(1, min(run.total_requests or 1, 1000)), run.seed)
    return recs


def _summarise(run: BenchmarkRun, timelines: list[RequestTimeline], window: Optional[RunWindow]) -> Optional[MetricsSummary]:
    if not timelines or window is None:
        return None
    return aggregate(timelines, window)


# -- simulator endpoint -------------------------------------------------------


def resolve_sim_topology(endpoint: str) -> Topology:
    """``sim://1xTP8`` (shipped layouts, ``sim://dynamic``) or ``sim://path/to/topology.yaml``."""
    target = endpoint[len(SIM_SCHEME):]
    named = standard_topologies()
    if target in named:
        return named[target]
    if target.startswith("dynamic"):
        _, _, thr = target.partition("-")
        return dynamic_topology(int(thr) if thr else 64)
    path = Path(target)
    if not path.exists():
        raise EndpointUnreachableError(f"unknown simulator target {target!r}")
    return load_topology(path)


def sim_requests(run: BenchmarkRun, records: list[PromptRecord]) -> list[SimRequest]:
    out = []
    for i in range(run.total_requests or 0):
        rec = records[i % len(records)]
        seed = (run.seed << 32) | i
        if run.min_output_tokens is None:
            n_out = run.max_tokens
        else:
            n_out = sampled_length(seed, min(run.min_output_tokens, run.max_tokens), run.max_tokens)
        out.append(SimRequest(f"req-{i}", rec.prompt_tokens, n_out, seed))
    return out


def run_simulated(run: BenchmarkRun, topology: Optional[Topology] = None) -> BenchmarkReport:
    """Same closed-loop discipline, executed on the virtual-clock cluster model."""
    topology = topology or resolve_sim_topology(run.endpoint)
    reqs = sim_requests(run, _records_for(run))
    if not reqs:
        return BenchmarkReport(run, [], None)
    res = simulate_closed_loop(topology, reqs, run.concurrency, streaming=run.stream)
    events = [(tl.t0, 1) for tl in res.timelines] + [(tl.t6, -1) for tl in res.timelines]
    # the model has no client deadline; apply it after the fact
    deadline = int(run.timeout * 1e9)
    tls = []
    for tl in res.timelines:
        if tl.t6 - tl.t0 > deadline:
            tl = RequestTimeline(tl.request_id, t0=tl.t0, t6=tl.t0 + deadline, n_generated=tl.n_generated, status=TIMEOUT)
        tls.append(tl)
    return BenchmarkReport(run, tls, _summarise(run, tls, res.window), res.window, events)


# -- HTTP endpoint ------------------------------------------------------------


@dataclass
class _Result:
    t0: int
    t5: Optional[int] = None
    t6: Optional[int] = None
    tokens: int = 0
    status: str = FAILED
    trailer: Optional[dict] = None
    engine_tokens: Optional[int] = None
    order_ok: bool = True
    error: Optional[str] = None


def _timeline(rid: str, r: _Result, stream: bool) -> RequestTimeline:
    if r.status != COMPLETED:
        return RequestTimeline(rid, t0=r.t0, t5=r.t5, t6=r.t6, n_generated=r.tokens, status=r.status)
    t1 = t2 = t3 = t4 = None
    tr = r.trailer or {}
    if tr:
        t1 = tr.get("t1")
        t2 = tr.get("engine_t_start") or tr.get("t2_proxy")
        t3 = tr.get("engine_t_first") if stream else tr.get("engine_t_last")
        t3 = t3 or tr.get("t_first_frame")
        t4 = tr.get("t4") if stream else tr.get("t_done_frame")
        seq = [r.t0, t1, t2, t3, t4, r.t5, r.t6]
        if None in seq or any(a > b for a, b in zip(seq, seq[1:])):
            # server instants from another clock domain; keep client-side view only
            t1 = t2 = t3 = t4 = None
    return RequestTimeline(rid, r.t0, t1, t2, t3, t4, r.t5, r.t6, max(r.tokens, 1), COMPLETED)


async def _one_request(session: aiohttp.ClientSession, run: BenchmarkRun, rec: PromptRecord, idx: int) -> _Result:
    body = {
        "model": run.model,
        "messages": rec.messages(),
        "stream": run.stream,
        "max_tokens": run.max_tokens,
        "temperature": run.temperature,
        "top_p": run.top_p,
        "seed": (run.seed << 20) + idx,
    }
    headers = {"Authorization": f"Bearer {run.api_key}"} if run.api_key else {}
    r = _Result(t0=time.monotonic_ns())
    try:
        await asyncio.wait_for(_exchange(session, run, body, headers, r), run.timeout)
    except asyncio.TimeoutError:
        r.status = TIMEOUT
        r.t6 = time.monotonic_ns()
    return r


async def _exchange(session: aiohttp.ClientSession, run: BenchmarkRun, body: dict, headers: dict, r: _Result) -> None:
    url = run.endpoint.rstrip("/") + "/v1/chat/completions"
    async with session.post(url, json=body, headers=headers) as resp:
        if resp.status != 200:
            text = await resp.text()
            r.t6 = time.monotonic_ns()
            r.error = f"HTTP {resp.status}: {text[:200]}"
            return
        if not run.stream:
            data = await resp.json(content_type=None)
            r.t5 = r.t6 = time.monotonic_ns()
            usage = data.get("usage") or {}
            r.tokens = int(usage.get("completion_tokens", 0)) or len(data["choices"][0]["message"]["content"].split())
            r.trailer = data.get("x_timeline")
            if r.trailer:
                r.engine_tokens = r.trailer.get("engine_total_tokens")
            r.status = COMPLETED
            return
        last_seq = 0
        async for raw in resp.content:
            if not raw.startswith(b"data:"):
                continue
            payload = raw[5:].strip()
            if payload == b"[DONE]":
                r.t6 = time.monotonic_ns()
                r.status = COMPLETED
                return
            chunk = json.loads(payload)
            if "error" in chunk:
                r.t6 = time.monotonic_ns()
                r.error = chunk["error"].get("message", "stream error")
                return
            choice = (chunk.get("choices") or [{}])[0]
            content = (choice.get("delta") or {}).get("content")
            if content:
                if r.t5 is None:
                    r.t5 = time.monotonic_ns()
                r.tokens += 1
                seq = chunk.get("x_seq")
                if seq is not None:
                    if seq <= last_seq:
                        r.order_ok = False
                    last_seq = seq
            if "x_timeline" in chunk:
                r.trailer = chunk["x_timeline"]
                r.engine_tokens = r.trailer.get("engine_total_tokens")
    # stream ended without the [DONE] sentinel
    r.t6 = time.monotonic_ns()
    r.error = r.error or "stream closed before [DONE]"


async def run_benchmark(run: BenchmarkRun, stop: Optional[asyncio.Event] = None) -> BenchmarkReport:
    """Keep exactly ``run.concurrency`` requests in flight until all are issued.

    Setting ``stop`` ends the run early; in-flight requests are cancelled and
    the partial report is flagged ``interrupted``.
    """
    if run.endpoint.startswith(SIM_SCHEME):
        return run_simulated(run)
    records = _records_for(run)
    total = run.total_requests or 0
    results: dict[int, _Result] = {}
    events: list[tuple[int, int]] = []
    next_idx = 0
    connect_errors = 0
    interrupted = False

    connector = aiohttp.TCPConnector(limit=run.concurrency, limit_per_host=run.concurrency)
    timeout = aiohttp.ClientTimeout(total=None, sock_connect=min(run.timeout, 10.0))
    async with aiohttp.ClientSession(connector=connector, timeout=timeout) as session:

        async def worker() -> None:
            nonlocal next_idx, connect_errors
            while next_idx < total and not (stop is not None and stop.is_set()):
                idx = next_idx
                next_idx += 1
                rec = records[idx % len(records)]
                t_sub = time.monotonic_ns()
                events.append((t_sub, 1))
                try:
                    res = await _one_request(session, run, rec, idx)
                except aiohttp.ClientConnectorError as e:
                    connect_errors += 1
                    res = _Result(t0=t_sub, t6=time.monotonic_ns(), error=f"connect: {e}")
                except (aiohttp.ClientError, ValueError) as e:
                    res = _Result(t0=t_sub, t6=time.monotonic_ns(), error=repr(e))
                results[idx] = res
                events.append((max(time.monotonic_ns(), t_sub), -1))

        workers = [asyncio.create_task(worker()) for _ in range(min(run.concurrency, max(total, 1)))]
        stopper = asyncio.create_task(stop.wait()) if stop is not None else None
        try:
            if stopper is None:
                await asyncio.gather(*workers)
            else:
                all_done = asyncio.gather(*workers)
                await asyncio.wait({all_done, stopper}, return_when=asyncio.FIRST_COMPLETED)
                if stop.is_set():
                    interrupted = True
                    for w in workers:
                        w.cancel()
                    await asyncio.gather(*workers, return_exceptions=True)
                else:
                    await all_done
        finally:
            if stopper is not None:
                stopper.cancel()

    timelines = []
    mismatches = order_bad = 0
    failures: dict[str, int] = {}
    for idx in sorted(results):
        r = results[idx]
        timelines.append(_timeline(f"req-{idx}", r, run.stream))
        if r.status == COMPLETED and r.engine_tokens is not None and r.engine_tokens != r.tokens:
            mismatches += 1
        if not r.order_ok:
            order_bad += 1
        if r.error:
            key = r.error.split(":")[0]
            failures[key] = failures.get(key, 0) + 1
    window = None
    if timelines:
        t_start = min(tl.t0 for tl in timelines)
        t_end = max(r.t6 or r.t0 for r in results.values())
        window = RunWindow(t_start, max(t_end, t_start + 1), sum(tl.n_generated for tl in timelines))
    report = BenchmarkReport(
        run, timelines, _summarise(run, timelines, window), window, events,
        interrupted=interrupted, token_mismatches=mismatches, order_violations=order_bad, failures=failures,
    )
    if results and connect_errors == len(results):
        report.error = f"endpoint unreachable: {run.endpoint}"
        raise EndpointUnreachableError(report.error, report)
    return report


async def sweep(concurrencies: list[int], base: BenchmarkRun, cooldown: float = 1.0) -> list[BenchmarkReport]:
    """One run per concurrency level, in the given order; a failed run is
    recorded in its report and the sweep carries on."""
    reports = []
    for i, c in enumerate(concurrencies):
        run = BenchmarkRun(**{**base.to_dict(), "api_key": base.api_key, "concurrency": c, "total_requests": None})
        try:
            reports.append(await run_benchmark(run))
        except EndpointUnreachableError as e:
            rep = e.args[1] if len(e.args) > 1 else BenchmarkReport(run, [], None)
            rep.error = str(e.args[0])
            reports.append(rep)
        except Exception as e:
            log.exception("run at concurrency %d failed", c)
            reports.append(BenchmarkReport(run, [], None, error=f"{type(e).__name__}: {e}"))
        if cooldown > 0 and i + 1 < len(concurrencies) and not base.endpoint.startswith(SIM_SCHEME):
            await asyncio.sleep(cooldown)
    return reports
