"""Replica registry, routing policies, connection pool and failover."""

from .failover import (
    EngineStream,
    ExhaustedAttemptsError,
    MidStreamFailureError,
    route_with_failover,
)
from .health import HealthProber, probe_replicas
from .pool import ChannelPool, ConnectFailureError, PooledChannel, PoolExhaustedError, ping
from .registry import (
    DYNAMIC_THRESHOLD,
    FAILURE,
    LEAST_INFLIGHT,
    ROUND_ROBIN,
    SUCCESS,
    NoHealthyReplicaError,
    Registry,
    ReplicaHandle,
    RoutingPolicy,
    UnknownReplicaError,
    report_outcome,
    select_replica,
)
