import threading
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llmgate.router.registry import (
    DYNAMIC_THRESHOLD,
    LEAST_INFLIGHT,
    ROUND_ROBIN,
    NoHealthyReplicaError,
    Registry,
    ReplicaHandle,
    RoutingPolicy,
    UnknownReplicaError,
    id_key,
    report_outcome,
    select_replica,
)

DYN = RoutingPolicy(DYNAMIC_THRESHOLD, 64, frozenset({"big"}), frozenset({"s0", "s1", "s2", "s3"}))


def reg(*ids, **kw):
    r = Registry(**kw)
    for i in ids:
        r.add(ReplicaHandle(i))
    return r


def test_dynamic_below_threshold_goes_low():
    r = reg("big", "s0", "s1", "s2", "s3")
    assert select_replica(DYN, r, 32).replica_id == "big"
    assert select_replica(DYN, r, 63).replica_id == "big"


def test_dynamic_at_threshold_goes_high():
    r = reg("big", "s0", "s1", "s2", "s3")
    assert select_replica(DYN, r, 64).replica_id in DYN.high_pool
    assert select_replica(DYN, r, 1000).replica_id in DYN.high_pool


def test_least_inflight_tie_breaks_by_id():
    r = reg("A", "B", "C")
    for rid, n in {"A": 3, "B": 1, "C": 1}.items():
        r.get(rid).inflight = n
    h = select_replica(RoutingPolicy(LEAST_INFLIGHT), r, 0)
    assert h.replica_id == "B" and h.inflight == 2


def test_natural_id_order():
    assert sorted(["r10", "r2", "r1"], key=id_key) == ["r1", "r2", "r10"]
    r = reg("r10", "r2")
    assert select_replica(RoutingPolicy(LEAST_INFLIGHT), r, 0).replica_id == "r2"


@pytest.mark.parametrize("n,k", [(1, 5), (3, 4), (5, 7)])
def test_round_robin_fairness(n, k):
    r = reg(*[f"r{i}" for i in range(n)])
    picks = Counter(select_replica(RoutingPolicy(ROUND_ROBIN), r, 0).replica_id for _ in range(k * n))
    assert set(picks.values()) == {k}


def test_round_robin_skips_unhealthy():
    r = reg("a", "b", "c")
    r.mark_unhealthy("b")
    picks = [select_replica(RoutingPolicy(ROUND_ROBIN), r, 0).replica_id for _ in range(4)]
    assert picks == ["a", "c", "a", "c"]


def test_three_failures_mark_unhealthy():
    r = reg("a")
    for i in range(3):
        r.get("a").inflight += 1
        report_outcome(r, "a", "failure")
        assert r.get("a").healthy == (i < 2)
    with pytest.raises(NoHealthyReplicaError):
        select_replica(RoutingPolicy(), r, 0)


def test_success_resets_counter():
    r = reg("a")
    r.report_outcome("a", "failure")
    r.report_outcome("a", "failure")
    r.report_outcome("a", "success")
    assert r.get("a").consecutive_failures == 0
    r.report_outcome("a", "failure")
    assert r.get("a").healthy


def test_failure_on_unhealthy_only_counts():
    events = []
    r = reg("a")
    r.listeners.append(events.append)
    for _ in range(5):
        r.report_outcome("a", "failure")
    assert not r.get("a").healthy
    assert r.get("a").consecutive_failures == 5
    assert len(events) == 1


def test_unknown_replica_and_bad_outcome():
    r = reg("a")
    with pytest.raises(UnknownReplicaError):
        r.report_outcome("zz", "success")
    with pytest.raises(ValueError):
        r.report_outcome("a", "meh")


def test_inflight_never_negative_and_release():
    r = reg("a")
    r.report_outcome("a", "success")
    assert r.get("a").inflight == 0
    select_replica(RoutingPolicy(), r, 0)
    r.release("a")
    assert r.get("a").inflight == 0 and r.get("a").consecutive_failures == 0


def test_exclude_and_empty_pool():
    r = reg("a", "b")
    assert r.select(RoutingPolicy(), 0, exclude=["a"]).replica_id == "b"
    with pytest.raises(NoHealthyReplicaError):
        r.select(RoutingPolicy(), 0, exclude=["a", "b"])


def test_policy_validation_and_roundtrip():
    with pytest.raises(ValueError):
        RoutingPolicy("random")
    with pytest.raises(ValueError):
        RoutingPolicy(DYNAMIC_THRESHOLD, 64, frozenset({"a"}), frozenset({"a"}))
    with pytest.raises(ValueError):
        RoutingPolicy(DYNAMIC_THRESHOLD, 64, frozenset(), frozenset({"a"}))
    assert RoutingPolicy.from_dict(DYN.to_dict()) == DYN


def test_concurrent_selection_is_linearizable():
    """Threads racing through select must spread load exactly like a serial run."""
    r = reg(*[f"r{i}" for i in range(4)])
    barrier = threading.Barrier(8)

    def worker():
        barrier.wait()
        for _ in range(250):
            r.select(RoutingPolicy(LEAST_INFLIGHT), 0)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert [h.inflight for h in r] == [500, 500, 500, 500]
    assert r.total_inflight() == 2000


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["sel", "ok", "fail"]), st.integers(0, 200)), max_size=80))
def test_trace_invariants(ops):
    """Inflight conservation and dynamic-pool correctness over random traces."""
    r = reg("big", "s0", "s1", "s2", "s3")
    live = []
    for op, conc in ops:
        if op == "sel":
            try:
                h = r.select(DYN, conc)
            except NoHealthyReplicaError:
                continue
            assert h.replica_id in DYN.pool_for(conc)
            live.append(h.replica_id)
        elif live:
            rid = live.pop(conc % len(live))
            r.report_outcome(rid, "success" if op == "ok" else "failure")
        assert r.total_inflight() == len(live)
    for rec in r.route_log:
        assert (rec.replica_id in DYN.low_pool) == (rec.concurrency < 64)
