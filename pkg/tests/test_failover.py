import asyncio

import pytest

from llmgate import protocol as P
from llmgate.engine.model import LatencyModel, ReplicaConfig
from llmgate.engine.replica import VirtualClock
from llmgate.engine.server import EngineServer
from llmgate.router.failover import ExhaustedAttemptsError, MidStreamFailureError, route_with_failover
from llmgate.router.health import HealthProber, probe_replicas
from llmgate.router.pool import ChannelPool
from llmgate.router.registry import LEAST_INFLIGHT, ROUND_ROBIN, Registry, ReplicaHandle, RoutingPolicy

FAST = LatencyModel(0, 0, 0.1, 0)
SLOW = LatencyModel(0, 0, 5.0, 0)


def cfg(rid, model=FAST, **kw):
    return ReplicaConfig(rid, latency_model=model, **kw)


async def dead_address():
    srv = await EngineServer(cfg("x")).start()
    addr = srv.address
    await srv.close()
    return addr


async def drain(stream):
    return [t async for t in stream]


def test_first_down_second_serves():
    async def main():
        good = await EngineServer(cfg("b"), clock=VirtualClock()).start()
        reg = Registry()
        reg.add(ReplicaHandle("a", address=await dead_address()))
        reg.add(ReplicaHandle("b", address=good.address))
        pool = ChannelPool(cap=2, connect_timeout=0.5)
        stream = await route_with_failover(P.Submit("q", "p", 1, 3), RoutingPolicy(LEAST_INFLIGHT), reg, pool, max_attempts=2)
        toks = await drain(stream)
        await good.close()
        return stream, toks, reg

    stream, toks, reg = asyncio.run(main())
    assert stream.replica_id == "b" and stream.attempts == 2
    assert [t.seq_no for t in toks] == [1, 2, 3] and stream.done.total_tokens == 3
    assert reg.get("a").consecutive_failures == 1
    assert reg.total_inflight() == 0


def test_all_down_exhausts_attempts():
    async def main():
        reg = Registry()
        for rid in ("a", "b", "c"):
            reg.add(ReplicaHandle(rid, address=await dead_address()))
        pool = ChannelPool(cap=2, connect_timeout=0.5)
        with pytest.raises(ExhaustedAttemptsError) as ei:
            await route_with_failover(P.Submit("q", "p", 1, 3), RoutingPolicy(ROUND_ROBIN), reg, pool, max_attempts=2)
        return ei.value, reg

    err, reg = asyncio.run(main())
    assert [rid for rid, _ in err.attempts] == ["a", "b"]
    assert reg.total_inflight() == 0


def test_mid_stream_failure_not_retried():
    async def main():
        a = await EngineServer(cfg("a", SLOW)).start()
        b = await EngineServer(cfg("b", SLOW)).start()
        reg = Registry()
        reg.add(ReplicaHandle("a", address=a.address))
        reg.add(ReplicaHandle("b", address=b.address))
        pool = ChannelPool(cap=2)
        stream = await route_with_failover(P.Submit("q", "p", 1, 1000), RoutingPolicy(LEAST_INFLIGHT), reg, pool, max_attempts=3)
        got = []
        with pytest.raises(MidStreamFailureError) as ei:
            async for tok in stream:
                got.append(tok.seq_no)
                if len(got) == 10:
                    await a.kill()
        await b.close()
        return got, ei.value, reg, b.submits

    got, err, reg, b_submits = asyncio.run(main())
    assert got == list(range(1, 11))
    assert err.tokens_delivered == 10
    assert b_submits == 0
    assert reg.get("a").consecutive_failures == 1 and reg.total_inflight() == 0


def test_overload_moves_on_without_penalty():
    async def main():
        busy = await EngineServer(cfg("a", SLOW, max_batch=1, max_waiting=0)).start()
        free = await EngineServer(cfg("b"), clock=VirtualClock()).start()
        reg = Registry()
        reg.add(ReplicaHandle("a", address=busy.address))
        reg.add(ReplicaHandle("b", address=free.address))
        pool = ChannelPool(cap=2)
        s = await route_with_failover(P.Submit("q", "p", 1, 2), RoutingPolicy(LEAST_INFLIGHT), reg, pool)
        await drain(s)
        await busy.close()
        await free.close()
        return s, reg

    s, reg = asyncio.run(main())
    assert s.replica_id == "b"
    assert reg.get("a").consecutive_failures == 0 and reg.get("a").healthy


def test_aclose_releases_inflight():
    async def main():
        async with EngineServer(cfg("a", SLOW)) as srv:
            reg = Registry()
            reg.add(ReplicaHandle("a", address=srv.address))
            pool = ChannelPool(cap=2)
            s = await route_with_failover(P.Submit("q", "p", 1, 100), RoutingPolicy(), reg, pool)
            await s.aclose()
            await asyncio.sleep(0.05)
            return reg, pool, srv.engine_stats()

    reg, pool, st = asyncio.run(main())
    assert reg.total_inflight() == 0 and reg.get("a").consecutive_failures == 0
    assert pool.open_count("a") == 0
    assert st.inflight == 0


# -- health probing -------------------------------------------------------

def test_probe_recovers_responding_replica():
    async def ok(h):
        return True

    reg = Registry()
    reg.add(ReplicaHandle("a"))
    reg.mark_unhealthy("a")
    assert asyncio.run(probe_replicas(reg, ok)) == ["a"]
    assert reg.get("a").healthy


def test_probe_keeps_dead_replica_down():
    async def main():
        reg = Registry()
        reg.add(ReplicaHandle("a", address=await dead_address()))
        reg.mark_unhealthy("a")
        for _ in range(3):
            assert await probe_replicas(reg) == []
        return reg

    assert not asyncio.run(main()).get("a").healthy


def test_restarted_replica_is_eligible_again():
    async def main():
        srv = await EngineServer(cfg("a"), clock=VirtualClock()).start()
        reg = Registry(failure_limit=1)
        reg.add(ReplicaHandle("a", address=srv.address))
        pool = ChannelPool(cap=2, connect_timeout=0.5)
        prober = HealthProber(reg, interval=0.02)
        prober.start()
        port = srv.port
        await srv.kill()
        with pytest.raises(ExhaustedAttemptsError):
            await route_with_failover(P.Submit("q1", "p", 1, 2), RoutingPolicy(), reg, pool, max_attempts=1)
        assert not reg.get("a").healthy
        await asyncio.sleep(0.1)
        assert not reg.get("a").healthy
        srv = await EngineServer(cfg("a"), port=port, clock=VirtualClock()).start()
        for _ in range(50):
            if reg.get("a").healthy:
                break
            await asyncio.sleep(0.02)
        s = await route_with_failover(P.Submit("q2", "p", 1, 2), RoutingPolicy(), reg, pool, max_attempts=1)
        toks = await drain(s)
        await prober.stop()
        await srv.close()
        return toks

    assert [t.seq_no for t in asyncio.run(main())] == [1, 2]
