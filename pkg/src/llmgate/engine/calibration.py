"""Shipped latency coefficients for 8-GPU parallelism layouts.

The numbers are not measurements.  They are picked so that the affine model
reproduces the ordering seen on real hardware:

* more tensor parallelism gives a faster single iteration (lowest d(1) at TP8),
* but each extra batch slot costs relatively more at high TP because of the
  all-reduce traffic, so several small replicas win once the load is high.

Per-replica decode throughput at batch b is b / (d0 + d1*b).  With the
defaults below and ``max_batch = 64``:

======  ========  =========  ===========  ===========  ============
layout  d(1) ms   c=4 tok/s  c=64 tok/s   c=128 tok/s  c=256 tok/s
======  ========  =========  ===========  ===========  ============
1xTP8   6.20      588        3404         3404         3404
2xTP4   9.25      421        3765         5120         5120
4xTP2   11.32     353        3970         6026         8132
======  ========  =========  ===========  ===========  ============

(decode only; prefill lowers all of them slightly).  The crossover between
1xTP8 and 4xTP2 falls between 16 and 64 concurrent requests, which is what
makes a threshold of 64 a sound switch point for the dynamic policy.
See docs/calibration.md for the derivation.
"""

from __future__ import annotations

from .model import LatencyModel, ReplicaConfig
from ..router.registry import DYNAMIC_THRESHOLD, LEAST_INFLIGHT, RoutingPolicy
from ..topology import Topology

TOTAL_GPUS = 8
MAX_BATCH = 64

# per tensor-parallel degree (pure TP, ep = 1)
COEFFICIENTS: dict[int, LatencyModel] = {
    8: LatencyModel(prefill_base_ms=2.0, prefill_per_token_ms=0.02, decode_base_ms=6.0, decode_per_batch_slot_ms=0.20),
    4: LatencyModel(prefill_base_ms=3.0, prefill_per_token_ms=0.035, decode_base_ms=9.0, decode_per_batch_slot_ms=0.25),
    2: LatencyModel(prefill_base_ms=4.0, prefill_per_token_ms=0.06, decode_base_ms=11.0, decode_per_batch_slot_ms=0.32),
}

# KV budget in tokens per GPU left over after weights; a TP-k replica holds k of them
KV_TOKENS_PER_GPU = 50_000


def replica_config(replica_id: str, tp: int, ep: int = 1, max_batch: int = MAX_BATCH, **kw) -> ReplicaConfig:
    if tp not in COEFFICIENTS:
        raise ValueError(f"no shipped calibration for TP{tp}; have {sorted(COEFFICIENTS)}")
    return ReplicaConfig(
        replica_id=replica_id,
        tp_degree=tp,
        ep_degree=ep,
        gpu_count=tp * ep,
        latency_model=kw.pop("latency_model", COEFFICIENTS[tp]),
        kv_capacity_tokens=kw.pop("kv_capacity_tokens", KV_TOKENS_PER_GPU * tp * ep),
        max_batch=max_batch,
        **kw,
    )


def static_topology(replicas: int, tp: int, prefix: str = "", policy: str = LEAST_INFLIGHT) -> Topology:
    """``replicas`` copies of a TP-``tp`` replica, e.g. (4, 2) is 4xTP2."""
    prefix = prefix or f"tp{tp}-"
    return Topology(
        tuple(replica_config(f"{prefix}{i}", tp) for i in range(replicas)),
        RoutingPolicy(kind=policy),
        name=f"{replicas}xTP{tp}",
    )


def standard_topologies() -> dict[str, Topology]:
    """The three equal-GPU layouts: 1xTP8, 2xTP4, 4xTP2."""
    return {
        "1xTP8": static_topology(1, 8),
        "2xTP4": static_topology(2, 4),
        "4xTP2": static_topology(4, 2),
    }


def dynamic_topology(threshold: int = 64) -> Topology:
    """1xTP8 as the low-concurrency pool and 4xTP2 as the high-concurrency pool."""
    low = static_topology(1, 8).replicas
    high = static_topology(4, 2).replicas
    policy = RoutingPolicy(
        kind=DYNAMIC_THRESHOLD,
        threshold=threshold,
        low_pool=frozenset(r.replica_id for r in low),
        high_pool=frozenset(r.replica_id for r in high),
    )
    return Topology(low + high, policy, name=f"dynamic-{threshold}")
