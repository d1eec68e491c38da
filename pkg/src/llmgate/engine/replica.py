"""One simulated replica: a scheduler loop driven by a wall or virtual clock."""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass
from typing import Optional, Protocol, Union

from .model import ReplicaConfig, SimRequest
from .scheduler import Active, BatchScheduler, EngineStats, token_text

log = logging.getLogger(__name__)


class WallClock:
    """Real time.  Instants are absolute ``monotonic_ns`` readings."""

    mode = "wall"

    def now(self) -> int:
        return time.monotonic_ns()

    # epoll rounds timeouts up to whole ms, so stop the coarse sleep early
    # and yield to the loop for the last stretch
    SPIN_NS = 1_200_000

    async def sleep_until(self, deadline_ns: int) -> None:
        delay = deadline_ns - time.monotonic_ns()
        if delay > self.SPIN_NS:
            await asyncio.sleep((delay - self.SPIN_NS) / 1e9)
        await asyncio.sleep(0)
        while time.monotonic_ns() < deadline_ns:
            await asyncio.sleep(0)


class VirtualClock:
    """Logical time that jumps forward instantly."""

    mode = "virtual"

    def __init__(self, start_ns: int = 0):
        self._now = start_ns

    def now(self) -> int:
        return self._now

    async def sleep_until(self, deadline_ns: int) -> None:
        if deadline_ns > self._now:
            self._now = deadline_ns
        await asyncio.sleep(0)


Clock = Union[WallClock, VirtualClock]


def make_clock(mode: str) -> Clock:
    if mode == "wall":
        return WallClock()
    if mode == "virtual":
        return VirtualClock()
    raise ValueError(f"clock mode must be 'wall' or 'virtual', got {mode!r}")


@dataclass(frozen=True)
class TokenEvent:
    request_id: str
    seq_no: int
    text: str
    t_ns: int


@dataclass(frozen=True)
class StreamEnd:
    request_id: str
    total_tokens: int
    t_start: int
    t_first: int
    t_last: int


class Sink(Protocol):
    def token(self, ev: TokenEvent) -> None: ...

    def done(self, end: StreamEnd) -> None: ...


class TokenStream:
    """In-process sink that is also an async iterator over a request's tokens."""

    def __init__(self) -> None:
        self._q: asyncio.Queue = asyncio.Queue()
        self.end: Optional[StreamEnd] = None

    def token(self, ev: TokenEvent) -> None:
        self._q.put_nowait(ev)

    def done(self, end: StreamEnd) -> None:
        self.end = end
        self._q.put_nowait(end)

    def __aiter__(self):
        return self

    async def __anext__(self) -> TokenEvent:
        item = await self._q.get()
        if isinstance(item, StreamEnd):
            raise StopAsyncIteration
        return item

    async def collect(self) -> list[TokenEvent]:
        return [ev async for ev in self]


class EngineReplica:
    """Owns one :class:`BatchScheduler` and runs its iteration loop.

    Submissions and stat queries run on the same event loop as the scheduler
    loop, so the state is never touched concurrently.
    """

    def __init__(self, config: ReplicaConfig, clock: Optional[Clock] = None):
        self.config = config
        self.clock = clock or WallClock()
        self.scheduler = BatchScheduler(config)
        self._sinks: dict[str, Sink] = {}
        self._wake = asyncio.Event()
        self._task: Optional[asyncio.Task] = None
        self.event_log: list[tuple[int, str, int]] = []
        self.record_events = False

    # -- public surface ---------------------------------------------------

    def submit(self, req: SimRequest, sink: Optional[Sink] = None) -> Sink:
        """Queue a request; raises ``OverloadedError`` / ``RequestTooLargeError``."""
        if req.request_id in self._sinks:
            raise ValueError(f"duplicate request id {req.request_id!r}")
        self.scheduler.submit(req)
        sink = sink if sink is not None else TokenStream()
        self._sinks[req.request_id] = sink
        self._wake.set()
        return sink

    def cancel(self, request_id: str) -> None:
        self._sinks.pop(request_id, None)
        self.scheduler.cancel(request_id)

    def engine_stats(self) -> EngineStats:
        return self.scheduler.stats()

    def start(self) -> None:
        if self._task is None or self._task.done():
            self._task = asyncio.get_running_loop().create_task(self._loop())

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
            self._task = None

    async def run_until_idle(self) -> None:
        """Drive iterations inline until no work remains (virtual mode helper)."""
        while self.scheduler.has_work():
            await self._iterate()

    # -- loop -------------------------------------------------------------

    async def _loop(self) -> None:
        try:
            while True:
                if not self.scheduler.has_work():
                    self._wake.clear()
                    await self._wake.wait()
                    continue
                await self._iterate()
        except asyncio.CancelledError:
            raise
        except Exception:
            log.exception("replica %s: scheduler loop crashed", self.config.replica_id)
            raise

    async def _iterate(self) -> None:
        sched = self.scheduler
        start = self.clock.now()
        plan = sched.plan(start)
        if not sched.running:
            # everything left is blocked; nothing can progress until a cancel
            self._wake.clear()
            await self._wake.wait()
            return
        await self.clock.sleep_until(start + plan.duration_ns)
        now = self.clock.now()
        emitted, finished = sched.commit(now)
        sinks = self._sinks
        record = self.record_events
        for a in emitted:
            rid = a.req.request_id
            sink = sinks.get(rid)
            if record:
                self.event_log.append((now, rid, a.generated))
            if sink is not None:
                sink.token(TokenEvent(rid, a.generated, token_text(a.req.seed, a.generated), now))
        for a in finished:
            sink = sinks.pop(a.req.request_id, None)
            if sink is not None:
                sink.done(StreamEnd(a.req.request_id, a.generated, a.t_start, a.t_first, a.t_last))
