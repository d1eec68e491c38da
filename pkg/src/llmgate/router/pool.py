"""Per-replica pool of persistent engine connections."""

from __future__ import annotations

import asyncio
import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

from .. import protocol as P

log = logging.getLogger(__name__)

DEFAULT_STREAM_BUFFER = 64 * 1024


class PoolError(Exception):
    pass


class PoolExhaustedError(PoolError):
    pass


class ConnectFailureError(PoolError, ConnectionError):
    pass


def split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {address!r}, expected host:port")
    return host, int(port)


@dataclass(eq=False)
class PooledChannel:
    replica_id: str
    reader: asyncio.StreamReader
    writer: asyncio.StreamWriter
    created_at: float = field(default_factory=time.monotonic)
    in_use: bool = False
    uses: int = 0

    @property
    def stale(self) -> bool:
        return self.writer.is_closing() or self.reader.at_eof() or self.reader.exception() is not None

    def close(self) -> None:
        if not self.writer.is_closing():
            self.writer.close()


class _ReplicaSlots:
    def __init__(self) -> None:
        self.idle: list[PooledChannel] = []
        self.busy: set[PooledChannel] = set()
        self.open = 0
        self.cond = asyncio.Condition()


class ChannelPool:
    """Reuse connections per replica, never holding more than ``cap`` open.

    One channel carries one request at a time.  ``acquire`` prefers an idle
    channel, then opens a new one below the cap, then waits up to
    ``acquire_timeout`` for a release.
    """

    def __init__(
        self,
        cap: int = 8,
        connect_timeout: float = 2.0,
        acquire_timeout: float = 5.0,
        stream_buffer: int = DEFAULT_STREAM_BUFFER,
        caps: Optional[dict[str, int]] = None,
    ):
        if cap < 1:
            raise ValueError("pool cap must be >= 1")
        self.cap = cap
        self.caps = dict(caps or {})
        self.connect_timeout = connect_timeout
        self.acquire_timeout = acquire_timeout
        self.stream_buffer = stream_buffer
        self._slots: dict[str, _ReplicaSlots] = {}
        self.opened_total = 0
        self.max_open_seen: dict[str, int] = {}

    def cap_for(self, replica_id: str) -> int:
        return self.caps.get(replica_id, self.cap)

    def _slot(self, replica_id: str) -> _ReplicaSlots:
        s = self._slots.get(replica_id)
        if s is None:
            s = self._slots[replica_id] = _ReplicaSlots()
        return s

    def open_count(self, replica_id: str) -> int:
        s = self._slots.get(replica_id)
        return s.open if s else 0

    def idle_count(self, replica_id: str) -> int:
        s = self._slots.get(replica_id)
        return len(s.idle) if s else 0

    def busy_channels(self, replica_id: str) -> list[PooledChannel]:
        s = self._slots.get(replica_id)
        return list(s.busy) if s else []

    async def acquire(self, replica_id: str, address: str, timeout: Optional[float] = None) -> PooledChannel:
        s = self._slot(replica_id)
        timeout = self.acquire_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        while True:
            while s.idle:
                ch = s.idle.pop()
                if ch.stale:
                    s.open -= 1
                    ch.close()
                    continue
                ch.in_use = True
                ch.uses += 1
                s.busy.add(ch)
                return ch
            if s.open < self.cap_for(replica_id):
                s.open += 1
                self.max_open_seen[replica_id] = max(self.max_open_seen.get(replica_id, 0), s.open)
                try:
                    ch = await self._connect(replica_id, address)
                except BaseException:
                    s.open -= 1
                    async with s.cond:
                        s.cond.notify()
                    raise
                ch.in_use = True
                ch.uses += 1
                s.busy.add(ch)
                return ch
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise PoolExhaustedError(f"{replica_id}: all {s.open} channels busy")
            async with s.cond:
                try:
                    await asyncio.wait_for(s.cond.wait(), remaining)
                except asyncio.TimeoutError:
                    raise PoolExhaustedError(f"{replica_id}: all {s.open} channels busy") from None

    async def _connect(self, replica_id: str, address: str) -> PooledChannel:
        host, port = split_address(address)
        try:
            reader, writer = await asyncio.wait_for(
                asyncio.open_connection(host, port, limit=self.stream_buffer), self.connect_timeout
            )
        except (OSError, asyncio.TimeoutError) as e:
            raise ConnectFailureError(f"{replica_id} at {address}: {e or type(e).__name__}") from e
        self.opened_total += 1
        return PooledChannel(replica_id, reader, writer)

    async def release(self, ch: PooledChannel, poisoned: bool = False) -> None:
        s = self._slot(ch.replica_id)
        ch.in_use = False
        s.busy.discard(ch)
        if poisoned or ch.stale or s.open > self.cap_for(ch.replica_id):
            s.open -= 1
            ch.close()
        else:
            s.idle.append(ch)
        async with s.cond:
            s.cond.notify()

    def drop_idle(self, replica_id: str) -> int:
        """Close idle channels to a replica (e.g. after it was marked unhealthy)."""
        s = self._slots.get(replica_id)
        if not s:
            return 0
        n = len(s.idle)
        for ch in s.idle:
            ch.close()
        s.open -= n
        s.idle.clear()
        return n

    async def close(self) -> None:
        for rid in list(self._slots):
            self.drop_idle(rid)


_nonce = itertools.count(1)


async def ping(address: str, timeout: float = 1.0) -> bool:
    """Protocol-level health check over a fresh connection."""
    host, port = split_address(address)
    writer = None
    try:
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
        nonce = next(_nonce)
        P.write_frame(writer, P.Ping(nonce))
        await writer.drain()
        frame = await asyncio.wait_for(P.read_frame(reader), timeout)
        return isinstance(frame, P.Pong) and frame.nonce == nonce
    except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError, P.ProtocolError):
        return False
    finally:
        if writer is not None:
            writer.close()
