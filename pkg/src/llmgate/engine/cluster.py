"""Closed-loop discrete-event simulation of a replica cluster on virtual time.

Every replica runs the real :class:`BatchScheduler`; routing goes through the
real :class:`Registry`.  The gateway and network are treated as free, so
t1 = t0, t4 = t5 = t3 and the timelines carry engine-side timing only.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from ..metrics import COMPLETED, RequestTimeline, RunWindow, aggregate, MetricsSummary
from ..router.registry import Registry, RouteRecord, RoutingPolicy
from ..topology import Topology
from .model import SimRequest
from .scheduler import BatchScheduler


@dataclass
class ClusterResult:
    concurrency: int
    timelines: list[RequestTimeline]
    window: RunWindow
    routes: list[RouteRecord] = field(default_factory=list)
    replica_of: dict[str, str] = field(default_factory=dict)
    max_inflight: int = 0
    iterations: int = 0
    max_kv_used: dict[str, int] = field(default_factory=dict)

    @property
    def throughput(self) -> float:
        return self.summary().throughput_tps

    def summary(self) -> MetricsSummary:
        return aggregate(self.timelines, self.window)


def simulate_closed_loop(
    topology: Topology,
    requests: Sequence[SimRequest],
    concurrency: int,
    policy: Optional[RoutingPolicy] = None,
    keep_route_log: bool = False,
    streaming: bool = True,
) -> ClusterResult:
    """Run ``requests`` through the cluster keeping ``concurrency`` in flight.

    A completion at time t submits the next request at the same t.  All
    events at one instant are applied before any idle replica plans its next
    iteration, so simultaneous arrivals share a batch.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    policy = policy or topology.policy
    registry = Registry.from_configs(topology.replicas, keep_route_log=keep_route_log)
    scheds = {r.replica_id: BatchScheduler(r) for r in topology.replicas}
    busy = {rid: False for rid in scheds}
    max_kv = {rid: 0 for rid in scheds}

    heap: list[tuple[int, int, str]] = []
    seq = 0
    pending = iter(requests)
    submitted_at: dict[str, int] = {}
    replica_of: dict[str, str] = {}
    timelines: list[RequestTimeline] = []
    inflight = 0
    max_inflight = 0
    remaining = len(requests)
    dirty: set[str] = set()

    def submit(now: int) -> bool:
        nonlocal inflight, max_inflight
        req = next(pending, None)
        if req is None:
            return False
        inflight += 1
        max_inflight = max(max_inflight, inflight)
        h = registry.select(policy, inflight)
        scheds[h.replica_id].submit(req)
        submitted_at[req.request_id] = now
        replica_of[req.request_id] = h.replica_id
        dirty.add(h.replica_id)
        return True

    def kick(now: int) -> None:
        nonlocal seq
        for rid in sorted(dirty):
            if busy[rid]:
                continue
            s = scheds[rid]
            plan = s.plan(now)
            if s.running:
                # a plan with zero duration still emits at `now`
                heapq.heappush(heap, (now + plan.duration_ns, seq, rid))
                seq += 1
                busy[rid] = True
                if s.kv_used > max_kv[rid]:
                    max_kv[rid] = s.kv_used
        dirty.clear()

    for _ in range(concurrency):
        if not submit(0):
            break
    kick(0)

    while heap:
        now = heap[0][0]
        while heap and heap[0][0] == now:
            _, _, rid = heapq.heappop(heap)
            s = scheds[rid]
            _, finished = s.commit(now)
            if s.kv_used > max_kv[rid]:
                max_kv[rid] = s.kv_used
            busy[rid] = False
            dirty.add(rid)
            for a in finished:
                rid_req = a.req.request_id
                registry.report_outcome(rid, "success")
                inflight -= 1
                remaining -= 1
                t0 = submitted_at.pop(rid_req)
                t3 = a.t_first if streaming else a.t_last
                timelines.append(
                    RequestTimeline(
                        request_id=rid_req,
                        t0=t0, t1=t0, t2=a.t_start, t3=t3, t4=t3, t5=t3, t6=a.t_last,
                        n_generated=a.generated,
                        status=COMPLETED,
                    )
                )
                submit(now)
        kick(now)

    if remaining:
        raise RuntimeError(f"simulation stalled with {remaining} requests unfinished")
    window = RunWindow(
        t_start=0,
        t_end=max((tl.t6 for tl in timelines), default=0),
        n_total_tokens=sum(tl.n_generated for tl in timelines),
    )
    return ClusterResult(
        concurrency=concurrency,
        timelines=timelines,
        window=window,
        routes=list(registry.route_log),
        replica_of=replica_of,
        max_inflight=max_inflight,
        iterations=sum(s.iterations for s in scheds.values()),
        max_kv_used=max_kv,
    )


def synthetic_requests(
    n: int,
    seed: int = 0,
    prompt_tokens: Iterable[int] = (),
    min_output: int = 32,
    max_output: int = 512,
) -> list[SimRequest]:
    """Deterministic workload: prompts cycle through ``prompt_tokens`` (or a
    seeded draw in [32, 512]); outputs are a seeded draw in [min_output, max_output]."""
    from .scheduler import sampled_length

    prompts = list(prompt_tokens)
    out = []
    for i in range(n):
        s = (seed << 32) | i
        pt = prompts[i % len(prompts)] if prompts else sampled_length(s ^ 0xABCDEF, 32, 512)
        out.append(SimRequest(f"req-{i}", pt, sampled_length(s, min_output, max_output), s))
    return out
