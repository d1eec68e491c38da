"""Independent reference implementations used by the tests.

Nothing here imports from the package under test: each oracle recomputes its
answer from raw numbers with the most literal method available.
"""

from __future__ import annotations

import random
from fractions import Fraction


# -- metrics ----------------------------------------------------------------

def random_instants(rng: random.Random, span_ns: int = 10**10) -> list[int]:
    """Seven non-decreasing integer instants t0..t6 (some gaps may be zero)."""
    base = rng.randrange(0, 10**12)
    gaps = [rng.choice([0, rng.randrange(1, span_ns // 7)]) for _ in range(6)]
    out = [base]
    for g in gaps:
        out.append(out[-1] + g)
    return out


def oracle_metrics(t: list[int], n: int) -> dict:
    """Every per-request metric straight from the definitions."""
    t0, t1, t2, t3, t4, t5, t6 = t
    out = {
        "average_latency": t5 - t0,
        "e2e_latency": t6 - t0,
        "gateway_latency": (t2 - t0) + (t5 - t3),
        "engine_latency": t3 - t2,
        "ttft": t4 - t0,
        "ttft_user": t5 - t0,
    }
    if n >= 2:
        # exact rational, then the nearest double
        out["tbt"] = float(Fraction(t6 - t5, n - 1))
    return out


def oracle_throughput(n_tokens: int, t_start: int, t_end: int) -> float:
    return float(Fraction(n_tokens * 10**9, t_end - t_start))


def oracle_percentile(values, p: int):
    """Nearest rank: the smallest value with at least p% of the sample at or below it."""
    xs = sorted(values)
    n = len(xs)
    for v in xs:
        if sum(1 for x in xs if x <= v) * 100 >= p * n:
            return v
    return xs[-1]


# -- single-replica scheduler trace ---------------------------------------

def trace_single_replica(requests, p0, p1, d0, d1, max_batch, capacity):
    """Reference continuous-batching trace with up-front KV reservation.

    ``requests`` is a list of (request_id, prompt_len, n_out), all submitted at
    time 0 in that order.  Coefficients are in ns.  Returns
    ``{rid: [token instants]}``.  Written as a literal loop over iterations so
    it shares no code with the package scheduler.
    """
    queue = list(requests)
    running = {}  # rid -> [prompt, left]
    used = 0
    now = 0
    times = {rid: [] for rid, _, _ in requests}
    while queue or running:
        prefill = 0
        while queue and len(running) < max_batch:
            rid, L, n = queue[0]
            if used + L + n > capacity:
                break
            queue.pop(0)
            used += L + n
            running[rid] = [L, n]
            prefill += p0 + p1 * L
        if not running:
            raise RuntimeError("stuck: head request can never fit")
        now += prefill + d0 + d1 * len(running)
        for rid in list(running):
            times[rid].append(now)
            running[rid][1] -= 1
            if running[rid][1] == 0:
                L, _ = running.pop(rid)
                used -= L + len(times[rid])
    return times


def closed_loop_identical_throughput(c: int, L: int, n: int, p0, p1, d0, d1) -> float:
    """Closed loop with c identical requests per round and nothing else.

    All c requests are admitted together (one prefill each), then decode in
    lockstep for n iterations.  Tokens per second = c*n / (c*p(L) + n*d(c)).
    """
    makespan = c * (p0 + p1 * L) + n * (d0 + d1 * c)
    return float(Fraction(c * n * 10**9, makespan))
