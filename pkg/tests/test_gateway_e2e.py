import asyncio
import io
import json

import httpx

from harness import AUTH, FAST, chat_body, stack
from llmgate.engine.model import LatencyModel
from llmgate.engine.scheduler import token_text
from llmgate.gateway.observability import ObservationSink, read_observations

URL = "/v1/chat/completions"


def parse_sse(text):
    events = []
    for block in text.split("\n\n"):
        if block.startswith("data: "):
            payload = block[6:]
            events.append(payload if payload == "[DONE]" else json.loads(payload))
    return events


async def post(client, body, headers=AUTH):
    return await client.post(URL, json=body, headers=headers)


def test_stream_three_tokens():
    async def main():
        async with stack() as s, httpx.AsyncClient(base_url=s.url) as c:
            r = await post(c, chat_body(seed=7))
            return r, s.gateway

    r, gw = asyncio.run(main())
    assert r.status_code == 200 and r.headers["content-type"].startswith("text/event-stream")
    events = parse_sse(r.text)
    assert events[-1] == "[DONE]"
    chunks = events[:-1]
    deltas = [e for e in chunks if e["choices"][0]["delta"].get("content")]
    assert [e["x_seq"] for e in deltas] == [1, 2, 3]
    assert [e["choices"][0]["delta"]["content"] for e in deltas] == [token_text(7, i) for i in (1, 2, 3)]
    assert deltas[0]["choices"][0]["delta"]["role"] == "assistant"
    assert all(e["object"] == "chat.completion.chunk" for e in chunks)
    final = chunks[-1]
    assert final["choices"][0]["finish_reason"] == "stop"
    tl = final["x_timeline"]
    assert tl["engine_total_tokens"] == 3
    assert tl["t1"] <= tl["t2_proxy"] <= tl["t4"] <= tl["t5_gateway"]
    assert tl["engine_t_start"] <= tl["engine_t_first"] <= tl["engine_t_last"]
    assert gw.inflight == 0


def test_buffered_completion():
    async def main():
        async with stack() as s, httpx.AsyncClient(base_url=s.url) as c:
            return await post(c, chat_body(stream=False, max_tokens=5, seed=3))

    r = asyncio.run(main())
    body = r.json()
    assert r.status_code == 200 and body["object"] == "chat.completion"
    assert body["choices"][0]["message"]["content"] == "".join(token_text(3, i) for i in range(1, 6))
    assert body["usage"]["completion_tokens"] == 5
    assert body["x_timeline"]["engine_total_tokens"] == 5


def test_unknown_key_is_401_without_dispatch():
    async def main():
        async with stack() as s, httpx.AsyncClient(base_url=s.url) as c:
            r1 = await post(c, chat_body(), headers={"Authorization": "Bearer nope"})
            r2 = await post(c, chat_body(), headers={})
            return r1, r2, s

    r1, r2, s = asyncio.run(main())
    assert r1.status_code == 401 and r2.status_code == 401
    assert r2.json()["error"]["code"] == "missing_authorization"
    assert s.gateway.registry.route_log == []
    assert sum(e.submits for e in s.servers) == 0


def test_blocked_prompt_is_422_without_dispatch():
    async def main():
        async with stack(blocklist=["forbidden"]) as s, httpx.AsyncClient(base_url=s.url) as c:
            r = await post(c, chat_body(content="tell me the FORBIDDEN thing"))
            return r, s

    r, s = asyncio.run(main())
    assert r.status_code == 422 and "forbidden" in r.json()["error"]["message"]
    assert s.gateway.registry.route_log == [] and sum(e.submits for e in s.servers) == 0


def test_rate_limit_429_with_retry_after():
    keys = [{"id": "slow", "key": "sk-test", "rps": 1, "burst": 2}]

    async def main():
        async with stack(keys=keys) as s, httpx.AsyncClient(base_url=s.url) as c:
            return [await post(c, chat_body()) for _ in range(3)]

    rs = asyncio.run(main())
    assert [r.status_code for r in rs] == [200, 200, 429]
    assert float(rs[2].headers["retry-after"]) > 0


def test_malformed_body_is_400():
    async def main():
        async with stack() as s, httpx.AsyncClient(base_url=s.url) as c:
            r1 = await c.post(URL, content=b"{not json", headers=AUTH)
            r2 = await post(c, {"messages": []})
            return r1, r2

    r1, r2 = asyncio.run(main())
    assert r1.status_code == 400 and r2.status_code == 400


def test_no_healthy_replica_is_503():
    async def main():
        async with stack(connect_timeout=0.2) as s, httpx.AsyncClient(base_url=s.url) as c:
            for e in s.servers:
                await e.kill()
            r = await post(c, chat_body())
            r2 = await post(c, chat_body())
            return r, r2

    r, r2 = asyncio.run(main())
    assert r.status_code == 503 and r2.status_code == 503


def test_output_filter_terminates_stream_at_containing_chunk():
    seed = 11
    words = [token_text(seed, i) for i in range(1, 30)]
    # first position whose word has not appeared earlier
    k = next(i for i in range(3, 29) if words[i] not in words[:i])
    term = words[k].strip()

    async def main():
        async with stack(blocklist=[term]) as s, httpx.AsyncClient(base_url=s.url) as c:
            return await post(c, chat_body(content="harmless", max_tokens=29, seed=seed))

    r = asyncio.run(main())
    events = parse_sse(r.text)
    assert events[-1] == "[DONE]"
    contents = [e["choices"][0]["delta"].get("content") for e in events[:-1] if e["choices"][0]["delta"].get("content")]
    assert len(contents) == k and term not in "".join(contents)
    assert events[-2]["choices"][0]["finish_reason"] == "content_filter"


def test_pipeline_ordering_and_observations(tmp_path):
    async def main():
        sink = ObservationSink(tmp_path)
        async with stack(sink=sink) as s, httpx.AsyncClient(base_url=s.url) as c:
            sem = asyncio.Semaphore(10)

            async def one(i):
                async with sem:
                    return await post(c, chat_body(stream=i % 2 == 0, max_tokens=2))

            rs = await asyncio.gather(*(one(i) for i in range(100)))
            await post(c, chat_body(), headers={"Authorization": "Bearer bad"})
            sink.flush()
            return rs, s

    rs, s = asyncio.run(main())
    assert all(r.status_code == 200 for r in rs)
    recs = read_observations(tmp_path)
    assert len(recs) == 100 and len({r.request_id for r in recs}) == 100
    assert all(r.status == "completed" and r.n_tokens == 2 for r in recs)
    stages = {}
    for rid, stage in s.gateway.trace:
        stages.setdefault(rid, []).append(stage)
    dispatched = [rid for rid, st in stages.items() if "dispatch" in st]
    assert len(dispatched) == 100
    for rid in dispatched:
        assert stages[rid] == ["auth_ok", "rate_ok", "filter_ok", "dispatch"]
    assert sum(e.submits for e in s.servers) == 100


def test_observation_matches_client_trailer(tmp_path):
    async def main():
        sink = ObservationSink(tmp_path)
        async with stack(sink=sink) as s, httpx.AsyncClient(base_url=s.url) as c:
            r = await post(c, chat_body(stream=False, max_tokens=4))
            sink.flush()
            return r.json()

    body = asyncio.run(main())
    (rec,) = read_observations(tmp_path)
    tl = body["x_timeline"]
    assert rec.request_id == body["id"]
    assert rec.t1 == tl["t1"] and rec.t4 == tl["t4"] and rec.t2 == tl["engine_t_start"]
    assert rec.t3 == tl["engine_t_last"] and rec.replica_id == tl["replica_id"]


class FullDisk(io.StringIO):
    def write(self, s):
        raise OSError(28, "No space left on device")


def test_disk_full_does_not_fail_requests(tmp_path):
    async def main():
        sink = ObservationSink(tmp_path, opener=lambda p: FullDisk())
        async with stack(sink=sink) as s, httpx.AsyncClient(base_url=s.url) as c:
            rs = [await post(c, chat_body(stream=i % 2 == 0)) for i in range(10)]
            sink.flush()
            return rs, sink

    rs, sink = asyncio.run(main())
    assert all(r.status_code == 200 for r in rs)
    assert sink.errors == 10 and sink.written == 0


def test_mid_stream_failure_sends_error_event():
    slow = LatencyModel(0, 0, 5.0, 0)

    async def main():
        async with stack(n_replicas=1, model=slow) as s, httpx.AsyncClient(base_url=s.url) as c:
            events = []
            async with c.stream("POST", URL, json=chat_body(max_tokens=1000), headers=AUTH) as resp:
                async for line in resp.aiter_lines():
                    if not line.startswith("data: "):
                        continue
                    ev = json.loads(line[6:]) if line[6:] != "[DONE]" else "[DONE]"
                    events.append(ev)
                    if len(events) == 5:
                        await s.servers[0].kill()
            return events, s.gateway

    events, gw = asyncio.run(main())
    assert events[-1]["error"]["code"] == "mid_stream_failure"
    assert events[-1]["x_tokens_delivered"] >= 5
    assert "[DONE]" not in events
    assert gw.counters["mid_stream_failure"] == 1 and gw.inflight == 0


def test_failover_before_first_token():
    async def main():
        async with stack(n_replicas=2, connect_timeout=0.2) as s, httpx.AsyncClient(base_url=s.url) as c:
            await s.servers[0].kill()
            rs = [await post(c, chat_body(max_tokens=2)) for _ in range(6)]
            return rs, s.gateway

    rs, gw = asyncio.run(main())
    assert all(r.status_code == 200 and parse_sse(r.text)[-1] == "[DONE]" for r in rs)
    assert not gw.registry.get("r0").healthy


def test_healthz_and_metrics():
    async def main():
        async with stack() as s, httpx.AsyncClient(base_url=s.url) as c:
            await post(c, chat_body(stream=False))
            return (await c.get("/healthz")).json(), (await c.get("/metrics")).json()

    health, metrics = asyncio.run(main())
    assert health == {"status": "ok", "healthy_replicas": 2, "replicas": 2}
    assert metrics["counters"]["completed"] == 1
    assert metrics["summary"]["completed"] == 1
    assert {r["replica_id"] for r in metrics["replicas"]} == {"r0", "r1"}


def test_slow_client_gets_flow_control():
    """A client that stops reading must not make the gateway buffer the whole output."""
    fast = LatencyModel(0, 0, 0.05, 0)

    async def main():
        async with stack(n_replicas=1, model=fast, stream_buffer_bytes=16 * 1024) as s:
            host, port = s.url[len("http://"):].split(":")
            reader, writer = await asyncio.open_connection(host, int(port))
            body = json.dumps(chat_body(max_tokens=200_000)).encode()
            writer.write(
                b"POST " + URL.encode() + b" HTTP/1.1\r\nHost: x\r\nAuthorization: Bearer sk-test\r\n"
                b"Content-Type: application/json\r\nContent-Length: " + str(len(body)).encode() + b"\r\n\r\n" + body
            )
            await writer.drain()
            await reader.read(1024)
            # wait for the gateway to stop reading its engine channel
            paused = False
            for _ in range(100):
                chans = s.gateway.pool.busy_channels("r0")
                if chans and not chans[0].writer.transport.is_reading():
                    paused = True
                    break
                await asyncio.sleep(0.05)
            buffered = len(chans[0].reader._buffer) if chans else None
            writer.transport.abort()
            await asyncio.sleep(0.1)
            return paused, buffered, s

    paused, buffered, s = asyncio.run(main())
    assert paused
    # StreamReader pauses the transport once it holds twice its limit
    assert buffered <= 2 * 16 * 1024 + 256
    assert s.gateway.inflight == 0
