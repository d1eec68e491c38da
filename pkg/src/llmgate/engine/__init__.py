"""Deterministic simulated inference replica."""

from .model import LatencyModel, ReplicaConfig, SimRequest
from .replica import EngineReplica, TokenStream, VirtualClock, WallClock, make_clock
from .scheduler import (
    BatchScheduler,
    EngineStats,
    OverloadedError,
    RequestTooLargeError,
    token_text,
)
from .server import EngineServer
