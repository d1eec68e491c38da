import datetime as dt
import io
import json

import pytest

from llmgate.gateway.app import BadRequestError, ChatRequest, GatewayConfig
from llmgate.gateway.auth import (
    ApiKeyRecord,
    DisabledKeyError,
    KeyStore,
    MissingHeaderError,
    UnknownKeyError,
    hash_key,
)
from llmgate.gateway.observability import ObservationRecord, ObservationSink, read_observations
from llmgate.gateway.ratelimit import TokenBucketLimiter
from llmgate.gateway.safety import INPUT, OUTPUT, ContentFilter

STORE = KeyStore.from_dicts([
    {"id": "alice", "key": "sk-alice", "rps": 5, "burst": 5},
    {"id": "bob", "key_sha256": hash_key("sk-bob"), "rps": 5, "burst": 5},
    {"id": "carol", "key": "sk-carol", "enabled": False},
])


# -- auth ---------------------------------------------------------------------

def test_valid_key():
    assert STORE.authenticate("Bearer sk-alice").key_id == "alice"
    assert STORE.authenticate("bearer  sk-bob ").key_id == "bob"


def test_disabled_key():
    with pytest.raises(DisabledKeyError):
        STORE.authenticate("Bearer sk-carol")


@pytest.mark.parametrize("header", [None, "", "sk-alice", "Basic sk-alice", "Bearer "])
def test_malformed_header(header):
    with pytest.raises(MissingHeaderError):
        STORE.authenticate(header)


def test_unknown_key():
    with pytest.raises(UnknownKeyError):
        STORE.authenticate("Bearer sk-mallory")


def test_store_never_holds_plaintext():
    for rec in STORE._records:
        assert "sk-" not in rec.key_hash and len(rec.key_hash) == 64


def test_keystore_load(tmp_path):
    p = tmp_path / "keys.yaml"
    p.write_text("keys:\n  - {id: k1, key: secret, rps: 2, burst: 3}\n")
    rec = KeyStore.load(p).authenticate("Bearer secret")
    assert (rec.key_id, rec.requests_per_second, rec.burst) == ("k1", 2.0, 3)


# -- rate limiting ------------------------------------------------------------

class FakeClock:
    def __init__(self):
        self.t = 100.0

    def __call__(self):
        return self.t


def test_burst_then_deny_then_refill():
    clock = FakeClock()
    lim = TokenBucketLimiter(clock)
    alice = STORE.get("alice")
    assert all(lim.check(alice) for _ in range(5))
    d = lim.check(alice)
    assert not d and d.retry_after == pytest.approx(0.2)
    clock.t += 1.0
    assert all(lim.check(alice) for _ in range(5))
    assert not lim.check(alice)


def test_keys_never_share_a_bucket():
    lim = TokenBucketLimiter(FakeClock())
    for _ in range(5):
        lim.check(STORE.get("alice"))
    assert not lim.check(STORE.get("alice"))
    assert lim.check(STORE.get("bob"))


def test_bad_rate_rejected():
    with pytest.raises(ValueError):
        ApiKeyRecord("x", "h", requests_per_second=0)


# -- content filter -----------------------------------------------------------

def test_empty_blocklist_passes():
    assert ContentFilter().check("anything at all") is None


def test_case_insensitive_match_names_term():
    f = ContentFilter(["foo", "bar"])
    assert f.check("FooBar") == "foo"
    assert f.check("xBARx", OUTPUT) == "bar"
    with pytest.raises(ValueError):
        f.check("x", "sideways")


def test_stream_filter_catches_split_term():
    s = ContentFilter(["secret"]).stream()
    assert s.feed(" the sec") is None
    assert s.feed("RET plan") == "secret"


def test_stream_filter_no_false_positive():
    s = ContentFilter(["abc"]).stream()
    assert [s.feed(c) for c in ["a", "b", "x", "c"]] == [None] * 4


def test_filter_load(tmp_path):
    p = tmp_path / "block.txt"
    p.write_text("# comment\n\nForbidden\n")
    assert ContentFilter.load(p).terms == ["Forbidden"]


# -- chat request ---------------------------------------------------------------

def test_chat_request_defaults():
    r = ChatRequest.from_body({"messages": [{"role": "user", "content": "hi"}]})
    assert (r.max_tokens, r.temperature, r.top_p, r.stream) == (512, 0.5, 0.7, False)


@pytest.mark.parametrize("body", [
    [],
    {"messages": []},
    {"messages": [{"role": "user"}]},
    {"messages": [{"role": "user", "content": "x"}], "max_tokens": 0},
    {"messages": [{"role": "user", "content": "x"}], "max_tokens": "5"},
    {"messages": [{"role": "user", "content": "x"}], "temperature": "hot"},
])
def test_chat_request_rejects(body):
    with pytest.raises(BadRequestError):
        ChatRequest.from_body(body)


def test_gateway_config_resolves_relative_paths(tmp_path):
    p = tmp_path / "gw.yaml"
    p.write_text("topology_path: topo.yaml\nkeys_path: /abs/keys.yaml\nport: 9000\n")
    cfg = GatewayConfig.load(p)
    assert cfg.topology_path == str(tmp_path / "topo.yaml")
    assert cfg.keys_path == "/abs/keys.yaml" and cfg.port == 9000
    p.write_text("bogus: 1\n")
    with pytest.raises(ValueError):
        GatewayConfig.load(p)


# -- observability --------------------------------------------------------------

def rec(i, **kw):
    return ObservationRecord(f"r{i}", "completed", "rep0", "alice", 3, t1=1, t2=2, t3=3, t4=4, t5=5, **kw)


def test_hundred_records_roundtrip(tmp_path):
    sink = ObservationSink(tmp_path)
    for i in range(100):
        sink.persist(rec(i))
    sink.close()
    got = read_observations(tmp_path)
    assert got == [rec(i) for i in range(100)]
    assert sink.written == 100


def test_daily_rotation(tmp_path):
    day = [dt.date(2024, 1, 1)]
    sink = ObservationSink(tmp_path, today=lambda: day[0])
    sink.persist(rec(1))
    sink.flush()
    day[0] = dt.date(2024, 1, 2)
    sink.persist(rec(2))
    sink.close()
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["observations-2024-01-01.jsonl", "observations-2024-01-02.jsonl"]


class FullDisk(io.StringIO):
    def write(self, s):
        raise OSError(28, "No space left on device")


def test_write_errors_are_swallowed(tmp_path):
    sink = ObservationSink(tmp_path, opener=lambda p: FullDisk())
    for i in range(5):
        sink.persist(rec(i))
    sink.close()
    assert (sink.written, sink.errors) == (0, 5)


def test_record_json_is_flat():
    d = json.loads(rec(0).to_json())
    assert d["request_id"] == "r0" and d["t5"] == 5
