"""TCP server speaking the framed engine protocol on behalf of one replica."""

from __future__ import annotations

import asyncio
import logging
from typing import Optional

from .. import protocol as P
from .model import ReplicaConfig, SimRequest
from .replica import Clock, EngineReplica, StreamEnd, TokenEvent, WallClock
from .scheduler import OverloadedError, RequestTooLargeError, sampled_length

log = logging.getLogger(__name__)


class _ConnSink:
    __slots__ = ("writer", "conn")

    def __init__(self, writer: asyncio.StreamWriter, conn: "_Connection"):
        self.writer = writer
        self.conn = conn

    def token(self, ev: TokenEvent) -> None:
        if not self.writer.is_closing():
            self.writer.write(P.encode(P.Token(ev.request_id, ev.seq_no, ev.text)))

    def done(self, end: StreamEnd) -> None:
        self.conn.requests.discard(end.request_id)
        if not self.writer.is_closing():
            self.writer.write(
                P.encode(P.Done(end.request_id, end.total_tokens, end.t_start, end.t_first, end.t_last))
            )


class _Connection:
    def __init__(self, writer: asyncio.StreamWriter):
        self.writer = writer
        self.requests: set[str] = set()


class EngineServer:
    """Serve one replica over TCP.

    ``min_output_tokens`` switches output length from "exactly max_tokens" to a
    deterministic per-seed draw in ``[min_output_tokens, max_tokens]``.
    """

    def __init__(
        self,
        config: ReplicaConfig,
        host: str = "127.0.0.1",
        port: int = 0,
        clock: Optional[Clock] = None,
        min_output_tokens: Optional[int] = None,
    ):
        self.config = config
        self.host = host
        self.port = port
        self.clock = clock or WallClock()
        self.min_output_tokens = min_output_tokens
        self.replica: Optional[EngineReplica] = None
        self._server: Optional[asyncio.base_events.Server] = None
        self._conns: set[_Connection] = set()
        self._handlers: set[asyncio.Task] = set()
        self.accepted_connections = 0
        self.submits = 0

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    @property
    def running(self) -> bool:
        return self._server is not None

    async def start(self) -> "EngineServer":
        self.replica = EngineReplica(self.config, self.clock)
        self.replica.start()
        self._server = await asyncio.start_server(self._handle, self.host, self.port, reuse_address=True)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("engine %s listening on %s", self.config.replica_id, self.address)
        return self

    async def kill(self) -> None:
        """Crash: stop listening, drop every connection and all scheduler state."""
        if self._server is not None:
            self._server.close()
            self._server = None
        for conn in list(self._conns):
            transport = conn.writer.transport
            if transport is not None:
                transport.abort()
        self._conns.clear()
        for task in list(self._handlers):
            task.cancel()
        if self.replica is not None:
            await self.replica.stop()
            self.replica = None

    async def restart(self) -> "EngineServer":
        await self.kill()
        return await self.start()

    async def close(self) -> None:
        await self.kill()

    async def __aenter__(self) -> "EngineServer":
        return await self.start()

    async def __aexit__(self, *exc) -> None:
        await self.close()

    def engine_stats(self):
        return self.replica.engine_stats() if self.replica else None

    def _output_tokens(self, sub: P.Submit) -> int:
        if self.min_output_tokens is None:
            return max(1, sub.max_tokens)
        return sampled_length(sub.seed, min(self.min_output_tokens, sub.max_tokens), sub.max_tokens)

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        self._handlers.add(task)
        self.accepted_connections += 1
        conn = _Connection(writer)
        self._conns.add(conn)
        sink = _ConnSink(writer, conn)
        try:
            while True:
                try:
                    frame = await P.read_frame(reader)
                except (asyncio.IncompleteReadError, ConnectionError):
                    break
                except P.ProtocolError as e:
                    P.write_frame(writer, P.Error("", P.E_BAD_FRAME, str(e)))
                    break
                if isinstance(frame, P.Submit):
                    self._on_submit(frame, conn, sink)
                elif isinstance(frame, P.Ping):
                    P.write_frame(writer, P.Pong(frame.nonce))
                else:
                    P.write_frame(writer, P.Error("", P.E_BAD_FRAME, f"unexpected {type(frame).__name__}"))
        except asyncio.CancelledError:
            pass
        finally:
            # dropped connection cancels whatever it still had in flight
            if self.replica is not None:
                for rid in list(conn.requests):
                    self.replica.cancel(rid)
            self._conns.discard(conn)
            self._handlers.discard(task)
            if not writer.is_closing():
                writer.close()

    def _on_submit(self, sub: P.Submit, conn: _Connection, sink: _ConnSink) -> None:
        self.submits += 1
        replica = self.replica
        if replica is None:
            P.write_frame(conn.writer, P.Error(sub.request_id, P.E_SHUTDOWN, "engine stopped"))
            return
        req = SimRequest(
            request_id=sub.request_id,
            prompt_token_count=max(1, sub.prompt_tokens),
            target_output_tokens=self._output_tokens(sub),
            seed=sub.seed,
        )
        try:
            replica.submit(req, sink)
        except OverloadedError as e:
            P.write_frame(conn.writer, P.Error(sub.request_id, P.E_OVERLOADED, str(e)))
            return
        except RequestTooLargeError as e:
            P.write_frame(conn.writer, P.Error(sub.request_id, P.E_TOO_LARGE, str(e)))
            return
        except ValueError as e:
            P.write_frame(conn.writer, P.Error(sub.request_id, P.E_INTERNAL, str(e)))
            return
        conn.requests.add(sub.request_id)
