"""Dispatch a request to a replica, retrying elsewhere until the first token."""

from __future__ import annotations

import asyncio
import logging
import time
from typing import AsyncIterator, Optional

from .. import protocol as P
from .pool import ChannelPool, PoolExhaustedError, PooledChannel
from .registry import FAILURE, SUCCESS, NoHealthyReplicaError, Registry, RoutingPolicy

log = logging.getLogger(__name__)


class DispatchError(Exception):
    pass


class ExhaustedAttemptsError(DispatchError):
    def __init__(self, message: str, attempts: list[tuple[str, str]]):
        super().__init__(message)
        self.attempts = attempts


class MidStreamFailureError(DispatchError):
    def __init__(self, message: str, tokens_delivered: int):
        super().__init__(message)
        self.tokens_delivered = tokens_delivered


class EngineError(DispatchError):
    def __init__(self, code: int, message: str):
        super().__init__(f"engine error {code}: {message}")
        self.code = code


_IO_ERRORS = (ConnectionError, OSError, asyncio.IncompleteReadError, P.ProtocolError, asyncio.TimeoutError)


class EngineStream:
    """Token stream from one replica, already past its first frame.

    Iterate to receive :class:`protocol.Token` frames; ``done`` holds the DONE
    trailer afterwards.  Exactly one of finishing, failing, or ``aclose`` hands
    the channel back and settles the replica's inflight count.
    """

    def __init__(
        self,
        registry: Registry,
        pool: ChannelPool,
        channel: PooledChannel,
        replica_id: str,
        first: P.Frame,
        dispatch_ns: int,
        first_frame_ns: int,
        attempts: int,
    ):
        self._registry = registry
        self._pool = pool
        self._ch: Optional[PooledChannel] = channel
        self.replica_id = replica_id
        self.dispatch_ns = dispatch_ns
        self.first_frame_ns = first_frame_ns
        self.attempts = attempts
        self.done: Optional[P.Done] = None
        self.tokens = 0
        self._first: Optional[P.Frame] = first
        self._last_seq = 0

    @property
    def finished(self) -> bool:
        return self._ch is None

    async def _settle(self, outcome: Optional[str], poisoned: bool) -> None:
        ch, self._ch = self._ch, None
        if ch is None:
            return
        await self._pool.release(ch, poisoned=poisoned)
        if outcome is None:
            self._registry.release(self.replica_id)
        else:
            self._registry.report_outcome(self.replica_id, outcome)

    async def aclose(self) -> None:
        """Abandon the stream early; closing the channel cancels it engine-side."""
        await self._settle(None, poisoned=True)

    def __aiter__(self) -> AsyncIterator[P.Token]:
        return self._iter()

    async def _iter(self) -> AsyncIterator[P.Token]:
        while self._ch is not None:
            if self._first is not None:
                frame, self._first = self._first, None
            else:
                try:
                    frame = await P.read_frame(self._ch.reader)
                except _IO_ERRORS as e:
                    await self._settle(FAILURE, poisoned=True)
                    raise MidStreamFailureError(
                        f"{self.replica_id}: stream broke after {self.tokens} tokens: {e!r}", self.tokens
                    ) from e
            if isinstance(frame, P.Token):
                if frame.seq_no != self._last_seq + 1:
                    await self._settle(FAILURE, poisoned=True)
                    raise MidStreamFailureError(
                        f"{self.replica_id}: token seq {frame.seq_no} after {self._last_seq}", self.tokens
                    )
                self._last_seq = frame.seq_no
                self.tokens += 1
                yield frame
            elif isinstance(frame, P.Done):
                self.done = frame
                await self._settle(SUCCESS, poisoned=False)
                return
            elif isinstance(frame, P.Error):
                await self._settle(FAILURE, poisoned=True)
                raise MidStreamFailureError(f"{self.replica_id}: {frame.message}", self.tokens)
            else:
                await self._settle(FAILURE, poisoned=True)
                raise MidStreamFailureError(f"{self.replica_id}: unexpected {type(frame).__name__}", self.tokens)


async def route_with_failover(
    submit: P.Submit,
    policy: RoutingPolicy,
    registry: Registry,
    pool: ChannelPool,
    max_attempts: int = 3,
    current_concurrency: int = 0,
    first_frame_timeout: Optional[float] = None,
) -> EngineStream:
    """Select, dispatch and wait for the first frame, failing over on errors.

    Errors before the first token (connect failure, dropped connection, engine
    ERROR frame) count against the replica and move on to one not yet tried.
    Overload rejections and pool exhaustion move on without a health penalty.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    tried: list[str] = []
    attempts: list[tuple[str, str]] = []
    for attempt in range(1, max_attempts + 1):
        try:
            handle = registry.select(policy, current_concurrency, exclude=tried)
        except NoHealthyReplicaError as e:
            if not tried:
                raise
            attempts.append(("-", str(e)))
            break
        rid = handle.replica_id
        tried.append(rid)
        try:
            ch = await pool.acquire(rid, handle.address)
        except PoolExhaustedError as e:
            registry.release(rid)
            attempts.append((rid, str(e)))
            continue
        except _IO_ERRORS as e:
            registry.report_outcome(rid, FAILURE)
            attempts.append((rid, repr(e)))
            continue
        try:
            P.write_frame(ch.writer, submit)
            await ch.writer.drain()
            dispatch_ns = time.monotonic_ns()
            if first_frame_timeout is None:
                frame = await P.read_frame(ch.reader)
            else:
                frame = await asyncio.wait_for(P.read_frame(ch.reader), first_frame_timeout)
            first_ns = time.monotonic_ns()
        except _IO_ERRORS as e:
            await pool.release(ch, poisoned=True)
            registry.report_outcome(rid, FAILURE)
            attempts.append((rid, repr(e)))
            log.info("dispatch of %s to %s failed before first token: %r", submit.request_id, rid, e)
            continue
        except BaseException:
            await pool.release(ch, poisoned=True)
            registry.release(rid)
            raise
        if isinstance(frame, P.Error):
            if frame.code == P.E_OVERLOADED:
                await pool.release(ch)
                registry.release(rid)
            else:
                await pool.release(ch, poisoned=True)
                registry.report_outcome(rid, FAILURE)
            attempts.append((rid, f"engine error {frame.code}: {frame.message}"))
            continue
        if isinstance(frame, (P.Token, P.Done)):
            return EngineStream(registry, pool, ch, rid, frame, dispatch_ns, first_ns, attempt)
        await pool.release(ch, poisoned=True)
        registry.report_outcome(rid, FAILURE)
        attempts.append((rid, f"unexpected {type(frame).__name__}"))
    raise ExhaustedAttemptsError(
        f"{submit.request_id}: gave up after {len(attempts)} attempt(s): "
        + "; ".join(f"{r}: {m}" for r, m in attempts),
        attempts,
    )
