"""Background probing that brings unhealthy replicas back."""

from __future__ import annotations

import asyncio
import logging
from typing import Awaitable, Callable, Optional

from .pool import ping
from .registry import Registry, ReplicaHandle

log = logging.getLogger(__name__)

PingFn = Callable[[ReplicaHandle], Awaitable[bool]]


async def _ping_handle(h: ReplicaHandle) -> bool:
    if not h.address:
        return False
    return await ping(h.address)


async def probe_replicas(registry: Registry, ping_fn: PingFn = _ping_handle) -> list[str]:
    """Ping every unhealthy replica once; returns the ids that recovered."""
    down = registry.unhealthy()
    if not down:
        return []
    results = await asyncio.gather(*(ping_fn(h) for h in down), return_exceptions=True)
    recovered = []
    for h, ok in zip(down, results):
        if ok is True:
            registry.mark_healthy(h.replica_id)
            recovered.append(h.replica_id)
            log.info("replica %s recovered", h.replica_id)
    return recovered


class HealthProber:
    def __init__(self, registry: Registry, interval: float = 1.0, ping_fn: PingFn = _ping_handle):
        self.registry = registry
        self.interval = interval
        self.ping_fn = ping_fn
        self._task: Optional[asyncio.Task] = None
        self.rounds = 0

    def start(self) -> None:
        if self._task is None:
            self._task = asyncio.get_running_loop().create_task(self._run())

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
            self._task = None

    async def _run(self) -> None:
        while True:
            await asyncio.sleep(self.interval)
            try:
                await probe_replicas(self.registry, self.ping_fn)
            except Exception:
                log.exception("health probe round failed")
            self.rounds += 1
