"""Per-key token-bucket rate limiting."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable

from .auth import ApiKeyRecord


@dataclass(frozen=True)
class Decision:
    allowed: bool
    retry_after: float = 0.0

    def __bool__(self) -> bool:
        return self.allowed


class _Bucket:
    __slots__ = ("tokens", "stamp")

    def __init__(self, tokens: float, stamp: float):
        self.tokens = tokens
        self.stamp = stamp


class TokenBucketLimiter:
    """Bucket per key id: capacity ``burst``, refilled at ``requests_per_second``."""

    def __init__(self, clock: Callable[[], float] = time.monotonic):
        self.clock = clock
        self._buckets: dict[str, _Bucket] = {}
        self._lock = threading.Lock()

    def check(self, rec: ApiKeyRecord) -> Decision:
        now = self.clock()
        with self._lock:
            b = self._buckets.get(rec.key_id)
            if b is None:
                b = self._buckets[rec.key_id] = _Bucket(float(rec.burst), now)
            else:
                b.tokens = min(float(rec.burst), b.tokens + (now - b.stamp) * rec.requests_per_second)
                b.stamp = now
            if b.tokens >= 1.0:
                b.tokens -= 1.0
                return Decision(True)
            return Decision(False, (1.0 - b.tokens) / rec.requests_per_second)

    def reset(self, key_id: str) -> None:
        with self._lock:
            self._buckets.pop(key_id, None)


def rate_limit(limiter: TokenBucketLimiter, rec: ApiKeyRecord) -> Decision:
    return limiter.check(rec)
