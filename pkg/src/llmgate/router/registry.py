"""Replica registry and the routing policies that pick from it."""

from __future__ import annotations

import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from ..engine.model import ReplicaConfig

ROUND_ROBIN = "round_robin"
LEAST_INFLIGHT = "least_inflight"
DYNAMIC_THRESHOLD = "dynamic_threshold"
POLICY_KINDS = (ROUND_ROBIN, LEAST_INFLIGHT, DYNAMIC_THRESHOLD)

SUCCESS = "success"
FAILURE = "failure"


class RouterError(Exception):
    pass


class NoHealthyReplicaError(RouterError):
    pass


class UnknownReplicaError(RouterError, KeyError):
    pass


def id_key(replica_id: str):
    """Natural sort key, so r2 < r10."""
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", replica_id))


@dataclass
class ReplicaHandle:
    replica_id: str
    config: Optional[ReplicaConfig] = None
    address: Optional[str] = None
    healthy: bool = True
    inflight: int = 0
    consecutive_failures: int = 0
    unhealthy_since: Optional[float] = None
    dispatches: int = 0


@dataclass(frozen=True)
class RoutingPolicy:
    kind: str = LEAST_INFLIGHT
    threshold: int = 64
    low_pool: frozenset[str] = frozenset()
    high_pool: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        object.__setattr__(self, "low_pool", frozenset(self.low_pool))
        object.__setattr__(self, "high_pool", frozenset(self.high_pool))
        if self.kind == DYNAMIC_THRESHOLD:
            if self.threshold < 1:
                raise ValueError("threshold must be positive")
            if not self.low_pool or not self.high_pool:
                raise ValueError("dynamic_threshold needs nonempty low_pool and high_pool")
            if self.low_pool & self.high_pool:
                raise ValueError(f"pools overlap: {sorted(self.low_pool & self.high_pool)}")

    def pool_for(self, concurrency: int) -> Optional[frozenset[str]]:
        """Eligible replica ids, or None for "all replicas"."""
        if self.kind != DYNAMIC_THRESHOLD:
            return None
        return self.low_pool if concurrency < self.threshold else self.high_pool

    @classmethod
    def from_dict(cls, d: dict) -> "RoutingPolicy":
        return cls(
            kind=d.get("kind", LEAST_INFLIGHT),
            threshold=int(d.get("threshold", 64)),
            low_pool=frozenset(map(str, d.get("low_pool", ()))),
            high_pool=frozenset(map(str, d.get("high_pool", ()))),
        )

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == DYNAMIC_THRESHOLD:
            d.update(
                threshold=self.threshold,
                low_pool=sorted(self.low_pool, key=id_key),
                high_pool=sorted(self.high_pool, key=id_key),
            )
        return d


@dataclass(frozen=True)
class RouteRecord:
    seq: int
    replica_id: str
    concurrency: int
    at: float


@dataclass
class Registry:
    """Shared replica table.

    ``select`` picks and reserves (increments inflight) under one lock, so two
    concurrent selections can never both act on the same stale minimum.
    """

    failure_limit: int = 3
    clock: Callable[[], float] = time.monotonic
    keep_route_log: bool = True
    handles: dict[str, ReplicaHandle] = field(default_factory=dict)
    route_log: list[RouteRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()
        self._rr_cursor = -1
        self._order: list[str] = []
        self._routes = 0
        self.listeners: list[Callable[[ReplicaHandle], None]] = []

    # -- membership -------------------------------------------------------

    def add(self, handle: ReplicaHandle) -> ReplicaHandle:
        with self._lock:
            if handle.replica_id in self.handles:
                raise ValueError(f"duplicate replica {handle.replica_id!r}")
            self.handles[handle.replica_id] = handle
            self._order = sorted(self.handles, key=id_key)
        return handle

    @classmethod
    def from_configs(cls, configs: Iterable[ReplicaConfig], **kw) -> "Registry":
        reg = cls(**kw)
        for c in configs:
            reg.add(ReplicaHandle(c.replica_id, c, c.address))
        return reg

    def get(self, replica_id: str) -> ReplicaHandle:
        try:
            return self.handles[replica_id]
        except KeyError:
            raise UnknownReplicaError(replica_id) from None

    def __iter__(self):
        return (self.handles[i] for i in self._order)

    def __len__(self) -> int:
        return len(self.handles)

    def total_inflight(self) -> int:
        return sum(h.inflight for h in self.handles.values())

    def unhealthy(self) -> list[ReplicaHandle]:
        return [h for h in self if not h.healthy]

    # -- selection --------------------------------------------------------

    def select(
        self,
        policy: RoutingPolicy,
        current_concurrency: int = 0,
        exclude: Iterable[str] = (),
    ) -> ReplicaHandle:
        excluded = set(exclude)
        with self._lock:
            pool = policy.pool_for(current_concurrency)
            candidates = [
                rid for rid in self._order
                if self.handles[rid].healthy
                and rid not in excluded
                and (pool is None or rid in pool)
            ]
            if not candidates:
                where = "" if pool is None else f" in pool {sorted(pool, key=id_key)}"
                raise NoHealthyReplicaError(f"no healthy replica{where}")
            if policy.kind == ROUND_ROBIN:
                chosen = self._next_round_robin(candidates)
            else:
                chosen = min(candidates, key=lambda rid: self.handles[rid].inflight)
            h = self.handles[chosen]
            h.inflight += 1
            h.dispatches += 1
            self._routes += 1
            if self.keep_route_log:
                self.route_log.append(RouteRecord(self._routes, chosen, current_concurrency, self.clock()))
            return h

    def _next_round_robin(self, candidates: list[str]) -> str:
        n = len(self._order)
        eligible = set(candidates)
        for step in range(1, n + 1):
            idx = (self._rr_cursor + step) % n
            rid = self._order[idx]
            if rid in eligible:
                self._rr_cursor = idx
                return rid
        raise AssertionError("unreachable: candidates not in order")

    # -- outcomes and health ----------------------------------------------

    def report_outcome(self, replica_id: str, outcome: str) -> None:
        if outcome not in (SUCCESS, FAILURE):
            raise ValueError(f"outcome must be success or failure, got {outcome!r}")
        became_unhealthy = None
        with self._lock:
            h = self.get(replica_id)
            if h.inflight > 0:
                h.inflight -= 1
            if outcome == SUCCESS:
                h.consecutive_failures = 0
                return
            h.consecutive_failures += 1
            if h.healthy and h.consecutive_failures >= self.failure_limit:
                h.healthy = False
                h.unhealthy_since = self.clock()
                became_unhealthy = h
        if became_unhealthy is not None:
            for fn in self.listeners:
                fn(became_unhealthy)

    def release(self, replica_id: str) -> None:
        """Drop one inflight without counting it as success or failure."""
        with self._lock:
            h = self.get(replica_id)
            if h.inflight > 0:
                h.inflight -= 1

    def mark_healthy(self, replica_id: str) -> None:
        with self._lock:
            h = self.get(replica_id)
            h.healthy = True
            h.consecutive_failures = 0
            h.unhealthy_since = None

    def mark_unhealthy(self, replica_id: str) -> None:
        with self._lock:
            h = self.get(replica_id)
            if h.healthy:
                h.healthy = False
                h.unhealthy_since = self.clock()
        for fn in self.listeners:
            fn(h)

    def snapshot(self) -> list[dict]:
        with self._lock:
            return [
                {
                    "replica_id": h.replica_id,
                    "address": h.address,
                    "healthy": h.healthy,
                    "inflight": h.inflight,
                    "consecutive_failures": h.consecutive_failures,
                    "dispatches": h.dispatches,
                }
                for h in (self.handles[i] for i in self._order)
            ]


def select_replica(policy: RoutingPolicy, registry: Registry, current_concurrency: int) -> ReplicaHandle:
    return registry.select(policy, current_concurrency)


def report_outcome(registry: Registry, replica_id: str, outcome: str) -> None:
    registry.report_outcome(replica_id, outcome)
