"""OpenAI-compatible chat gateway in front of the replica router."""

from __future__ import annotations

import asyncio
import collections
import json
import logging
import time
import uuid
import zlib
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import AsyncIterator, Optional, Union

import yaml
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response, StreamingResponse

from .. import protocol as P
from ..metrics import COMPLETED, FAILED, RequestTimeline, aggregate, run_window
from ..router.failover import (
    EngineStream,
    ExhaustedAttemptsError,
    MidStreamFailureError,
    route_with_failover,
)
from ..router.health import HealthProber
from ..router.pool import ChannelPool
from ..router.registry import NoHealthyReplicaError, Registry, ReplicaHandle
from ..topology import Topology, load_topology
from .auth import AuthError, KeyStore
from .observability import ObservationRecord, ObservationSink
from .ratelimit import TokenBucketLimiter
from .safety import INPUT, ContentFilter

log = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 512
DEFAULT_TEMPERATURE = 0.5
DEFAULT_TOP_P = 0.7


class BadRequestError(ValueError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[dict, ...]
    stream: bool = False
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    seed: Optional[int] = None

    @classmethod
    def from_body(cls, body: object) -> "ChatRequest":
        if not isinstance(body, dict):
            raise BadRequestError("request body must be a JSON object")
        msgs = body.get("messages")
        if not isinstance(msgs, list) or not msgs:
            raise BadRequestError("messages must be a nonempty list")
        for m in msgs:
            if not isinstance(m, dict) or not isinstance(m.get("role"), str) or not isinstance(m.get("content"), str):
                raise BadRequestError("each message needs string role and content")
        max_tokens = body.get("max_tokens", DEFAULT_MAX_TOKENS)
        if max_tokens is None:
            max_tokens = DEFAULT_MAX_TOKENS
        if not isinstance(max_tokens, int) or isinstance(max_tokens, bool) or max_tokens < 1:
            raise BadRequestError("max_tokens must be an integer >= 1")
        try:
            temperature = float(body.get("temperature", DEFAULT_TEMPERATURE))
            top_p = float(body.get("top_p", DEFAULT_TOP_P))
        except (TypeError, ValueError):
            raise BadRequestError("temperature and top_p must be numbers") from None
        seed = body.get("seed")
        if seed is not None and (not isinstance(seed, int) or seed < 0):
            raise BadRequestError("seed must be a non-negative integer")
        return cls(
            model=str(body.get("model", "")),
            messages=tuple(msgs),
            stream=bool(body.get("stream", False)),
            max_tokens=max_tokens,
            temperature=temperature,
            top_p=top_p,
            seed=seed,
        )

    @property
    def prompt_text(self) -> str:
        return "\n".join(m["content"] for m in self.messages)


@dataclass
class GatewayConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    keys_path: Optional[str] = None
    blocklist_path: Optional[str] = None
    topology_path: Optional[str] = None
    observability_dir: Optional[str] = None
    max_attempts: int = 3
    pool_cap: Optional[int] = None
    connect_timeout: float = 2.0
    acquire_timeout: float = 5.0
    first_token_timeout: Optional[float] = None
    probe_interval: float = 1.0
    failure_limit: int = 3
    stream_buffer_bytes: int = 64 * 1024
    recent_window: int = 10_000
    trace: bool = False
    model: str = "llmgate-sim"

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GatewayConfig":
        path = Path(path)
        text = path.read_text()
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown gateway config keys: {sorted(unknown)}")
        cfg = cls(**data)
        # relative paths resolve against the config file
        for name in ("keys_path", "blocklist_path", "topology_path", "observability_dir"):
            v = getattr(cfg, name)
            if v and not Path(v).is_absolute():
                setattr(cfg, name, str(path.parent / v))
        return cfg


def _seed_for(request_id: str) -> int:
    return zlib.crc32(request_id.encode())


def _error(status: int, message: str, code: str, headers: Optional[dict] = None) -> JSONResponse:
    err_type = "invalid_request_error" if status < 500 else "server_error"
    return JSONResponse(
        {"error": {"message": message, "type": err_type, "code": code}}, status_code=status, headers=headers
    )


def _sse(obj: dict) -> bytes:
    return b"data: " + json.dumps(obj, separators=(",", ":")).encode() + b"\n\n"


SSE_DONE = b"data: [DONE]\n\n"


@dataclass
class _Flight:
    """Per-request state owned by one handler."""

    request_id: str
    key_id: str
    stream: bool
    t1: int
    t2: Optional[int] = None
    t4: Optional[int] = None
    t5: Optional[int] = None
    replica_id: Optional[str] = None
    attempts: int = 0
    tokens: int = 0
    engine: Optional[P.Done] = None
    t_first_frame: Optional[int] = None
    t_done_frame: Optional[int] = None
    extra: dict = field(default_factory=dict)


class Gateway:
    """Request pipeline: auth -> rate limit -> input filter -> route -> relay -> persist."""

    def __init__(
        self,
        topology: Topology,
        keys: KeyStore,
        content_filter: Optional[ContentFilter] = None,
        config: Optional[GatewayConfig] = None,
        sink: Optional[ObservationSink] = None,
        limiter: Optional[TokenBucketLimiter] = None,
    ):
        self.config = config or GatewayConfig()
        self.topology = topology
        self.policy = topology.policy
        self.keys = keys
        self.filter = content_filter or ContentFilter()
        self.limiter = limiter or TokenBucketLimiter()
        self.registry = Registry.from_configs(topology.replicas, failure_limit=self.config.failure_limit)
        caps = {
            r.replica_id: self.config.pool_cap or max(8, r.max_batch)
            for r in topology.replicas
        }
        self.pool = ChannelPool(
            cap=self.config.pool_cap or 8,
            caps=caps,
            connect_timeout=self.config.connect_timeout,
            acquire_timeout=self.config.acquire_timeout,
            stream_buffer=self.config.stream_buffer_bytes,
        )
        self.registry.listeners.append(lambda h: self.pool.drop_idle(h.replica_id))
        self.prober = HealthProber(self.registry, interval=self.config.probe_interval)
        if sink is None and self.config.observability_dir:
            sink = ObservationSink(self.config.observability_dir)
        self.sink = sink
        self.inflight = 0
        self.max_inflight_seen = 0
        self.counters: collections.Counter = collections.Counter()
        self.trace: list[tuple[str, str]] = []
        self.recent: collections.deque = collections.deque(maxlen=self.config.recent_window)

    @classmethod
    def from_config(cls, config: GatewayConfig) -> "Gateway":
        if not config.topology_path:
            raise ValueError("gateway config needs topology_path")
        topology = load_topology(config.topology_path)
        keys = KeyStore.load(config.keys_path) if config.keys_path else KeyStore()
        filt = ContentFilter.load(config.blocklist_path) if config.blocklist_path else ContentFilter()
        return cls(topology, keys, filt, config)

    async def start(self) -> None:
        self.prober.start()

    async def close(self) -> None:
        await self.prober.stop()
        await self.pool.close()
        if self.sink is not None:
            self.sink.close()

    def _trace(self, request_id: str, stage: str) -> None:
        if self.config.trace:
            self.trace.append((request_id, stage))

    def _persist(self, fl: _Flight, status: str, http_status: int = 200, reason: Optional[str] = None) -> None:
        self.counters[status] += 1
        eng = fl.engine
        t3 = None
        if eng is not None and eng.t_first:
            t3 = eng.t_first if fl.stream else eng.t_last
        rec = ObservationRecord(
            request_id=fl.request_id,
            status=status,
            replica_id=fl.replica_id,
            api_key_id=fl.key_id,
            n_tokens=fl.tokens,
            t1=fl.t1,
            t2=(eng.t_start if eng is not None and eng.t_start else fl.t2),
            t3=t3,
            t4=fl.t4,
            t5=fl.t5,
            t_done=time.monotonic_ns(),
            http_status=http_status,
            reason=reason,
            attempts=fl.attempts,
            stream=fl.stream,
        )
        self.recent.append(rec)
        if self.sink is not None:
            self.sink.persist(rec)

    def _timeline_trailer(self, fl: _Flight) -> dict:
        eng = fl.engine
        return {
            "t1": fl.t1,
            "t2_proxy": fl.t2,
            "t4": fl.t4,
            "t5_gateway": fl.t5,
            "t_first_frame": fl.t_first_frame,
            "t_done_frame": fl.t_done_frame,
            "engine_t_start": eng.t_start if eng else None,
            "engine_t_first": eng.t_first if eng else None,
            "engine_t_last": eng.t_last if eng else None,
            "engine_total_tokens": eng.total_tokens if eng else None,
            "replica_id": fl.replica_id,
            "attempts": fl.attempts,
        }

    # -- pipeline -----------------------------------------------------------

    async def handle_chat(self, body_bytes: bytes, auth_header: Optional[str]) -> Response:
        t1 = time.monotonic_ns()
        request_id = "chatcmpl-" + uuid.uuid4().hex[:24]
        try:
            key = self.keys.authenticate(auth_header)
        except AuthError as e:
            self.counters["unauthorized"] += 1
            return _error(401, str(e), e.code)
        self._trace(request_id, "auth_ok")

        decision = self.limiter.check(key)
        if not decision:
            self.counters["rate_limited"] += 1
            retry = max(decision.retry_after, 0.001)
            return _error(429, "rate limit exceeded", "rate_limited", {"Retry-After": f"{retry:.3f}"})
        self._trace(request_id, "rate_ok")

        try:
            req = ChatRequest.from_body(json.loads(body_bytes or b"null"))
        except (ValueError, BadRequestError) as e:
            self.counters["bad_request"] += 1
            return _error(400, str(e), "bad_request")

        hit = self.filter.check(req.prompt_text, INPUT)
        if hit is not None:
            self.counters["filtered_input"] += 1
            return _error(422, f"prompt contains blocked content ({hit!r})", "content_filter")
        self._trace(request_id, "filter_ok")

        fl = _Flight(request_id, key.key_id, req.stream, t1)
        self.inflight += 1
        self.max_inflight_seen = max(self.max_inflight_seen, self.inflight)
        submit = P.Submit(
            request_id=request_id,
            prompt=req.prompt_text,
            prompt_tokens=max(1, len(req.prompt_text.split())),
            max_tokens=req.max_tokens,
            temperature=req.temperature,
            top_p=req.top_p,
            seed=req.seed if req.seed is not None else _seed_for(request_id),
        )
        try:
            self._trace(request_id, "dispatch")
            engine = await route_with_failover(
                submit,
                self.policy,
                self.registry,
                self.pool,
                max_attempts=self.config.max_attempts,
                current_concurrency=self.inflight,
                first_frame_timeout=self.config.first_token_timeout,
            )
        except (NoHealthyReplicaError, ExhaustedAttemptsError) as e:
            self.inflight -= 1
            self._persist(fl, FAILED, 503, str(e))
            return _error(503, str(e), "no_healthy_replica")
        except BaseException:
            self.inflight -= 1
            self._persist(fl, FAILED, 500, "dispatch aborted")
            raise
        fl.t2 = engine.dispatch_ns
        fl.t_first_frame = engine.first_frame_ns
        fl.replica_id = engine.replica_id
        fl.attempts = engine.attempts
        if req.stream:
            fl.t4 = engine.first_frame_ns
            return StreamingResponse(
                self._relay_stream(fl, req, engine),
                media_type="text/event-stream",
                headers={"Cache-Control": "no-cache", "X-Request-Id": request_id},
            )
        return await self._relay_buffered(fl, req, engine)

    async def _relay_stream(self, fl: _Flight, req: ChatRequest, engine: EngineStream) -> AsyncIterator[bytes]:
        created = int(time.time())
        base = {"id": fl.request_id, "object": "chat.completion.chunk", "created": created, "model": req.model or self.config.model}
        out_filter = self.filter.stream()
        status, reason = FAILED, "client disconnected"
        try:
            async for tok in engine:
                hit = out_filter.feed(tok.text)
                if hit is not None:
                    await engine.aclose()
                    self.counters["filtered_output"] += 1
                    status, reason = COMPLETED, f"content_filter:{hit}"
                    yield _sse({**base, "choices": [{"index": 0, "delta": {}, "finish_reason": "content_filter"}],
                                "x_timeline": self._timeline_trailer(fl)})
                    yield SSE_DONE
                    return
                delta = {"content": tok.text}
                if fl.tokens == 0:
                    delta["role"] = "assistant"
                fl.tokens += 1
                chunk = _sse({**base, "choices": [{"index": 0, "delta": delta, "finish_reason": None}], "x_seq": tok.seq_no})
                if fl.t5 is None:
                    fl.t5 = time.monotonic_ns()
                yield chunk
            fl.engine = engine.done
            fl.t_done_frame = time.monotonic_ns()
            status, reason = COMPLETED, None
            yield _sse({**base, "choices": [{"index": 0, "delta": {}, "finish_reason": "stop"}],
                        "usage": {"completion_tokens": fl.tokens},
                        "x_timeline": self._timeline_trailer(fl)})
            yield SSE_DONE
        except MidStreamFailureError as e:
            status, reason = FAILED, f"mid-stream failure: {e}"
            self.counters["mid_stream_failure"] += 1
            yield _sse({"error": {"message": str(e), "type": "stream_error", "code": "mid_stream_failure"},
                        "x_tokens_delivered": e.tokens_delivered})
        finally:
            if not engine.finished:
                await engine.aclose()
            self.inflight -= 1
            self._persist(fl, status, 200, reason)

    async def _relay_buffered(self, fl: _Flight, req: ChatRequest, engine: EngineStream) -> Response:
        parts: list[str] = []
        finish = "stop"
        out_filter = self.filter.stream()
        try:
            async for tok in engine:
                if out_filter.feed(tok.text) is not None:
                    await engine.aclose()
                    self.counters["filtered_output"] += 1
                    finish = "content_filter"
                    break
                parts.append(tok.text)
                fl.tokens += 1
        except MidStreamFailureError as e:
            self.inflight -= 1
            self._persist(fl, FAILED, 502, f"mid-stream failure: {e}")
            return _error(502, str(e), "mid_stream_failure")
        except BaseException:
            self.inflight -= 1
            if not engine.finished:
                await engine.aclose()
            self._persist(fl, FAILED, 500, "aborted")
            raise
        fl.t_done_frame = time.monotonic_ns()
        fl.t4 = fl.t_done_frame
        fl.engine = engine.done
        body = {
            "id": fl.request_id,
            "object": "chat.completion",
            "created": int(time.time()),
            "model": req.model or self.config.model,
            "choices": [{"index": 0, "message": {"role": "assistant", "content": "".join(parts)}, "finish_reason": finish}],
            "usage": {"prompt_tokens": max(1, len(req.prompt_text.split())), "completion_tokens": fl.tokens,
                      "total_tokens": fl.tokens + max(1, len(req.prompt_text.split()))},
        }
        fl.t5 = time.monotonic_ns()
        body["x_timeline"] = self._timeline_trailer(fl)
        self.inflight -= 1
        self._persist(fl, COMPLETED, 200, None if finish == "stop" else f"content_filter")
        return JSONResponse(body)

    # -- observability ------------------------------------------------------

    def metrics_snapshot(self) -> dict:
        snap = {
            "inflight": self.inflight,
            "max_inflight": self.max_inflight_seen,
            "counters": dict(self.counters),
            "replicas": self.registry.snapshot(),
            "pool": {
                h.replica_id: {
                    "open": self.pool.open_count(h.replica_id),
                    "idle": self.pool.idle_count(h.replica_id),
                    "busy": len(self.pool.busy_channels(h.replica_id)),
                }
                for h in self.registry
            },
        }
        # gateway vantage: t1 stands in for the submit instant
        tls = []
        for r in self.recent:
            if r.status == COMPLETED and None not in (r.t1, r.t2, r.t3, r.t4, r.t5) and r.t1 <= r.t2 <= r.t3 <= r.t4 <= r.t5:
                tls.append(RequestTimeline(r.request_id, t0=r.t1, t1=r.t1, t2=r.t2, t3=r.t3, t4=r.t4, t5=r.t5,
                                           t6=r.t_done, n_generated=max(1, r.n_tokens)))
        if tls:
            snap["summary"] = aggregate(tls, run_window(tls)).to_flat_dict()
        return snap


def create_app(gateway: Gateway) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        await gateway.start()
        try:
            yield
        finally:
            await gateway.close()

    app = FastAPI(title="llmgate", lifespan=lifespan)
    app.state.gateway = gateway

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request) -> Response:
        body = await request.body()
        return await gateway.handle_chat(body, request.headers.get("authorization"))

    @app.get("/healthz")
    async def healthz() -> dict:
        healthy = sum(1 for h in gateway.registry if h.healthy)
        return {"status": "ok" if healthy else "degraded", "healthy_replicas": healthy, "replicas": len(gateway.registry)}

    @app.get("/metrics")
    async def metrics() -> dict:
        return gateway.metrics_snapshot()

    return app
