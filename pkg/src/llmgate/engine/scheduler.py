"""Continuous-batching scheduler with KV-cache accounting in tokens.

The scheduler is a clock-free state machine.  A driver calls :meth:`plan` to
admit work and learn how long the next iteration takes, lets that much time
pass on whatever clock it owns, then calls :meth:`commit` to emit one token for
every running request.

Two KV policies are supported:

``guaranteed``
    Admission reserves a request's whole budget (prompt + remaining output),
    so running requests can never outgrow the cache and nothing is paused.
``max_utilization``
    Admission reserves only the current footprint plus room for the next
    token.  When the running batch cannot grow by one token each, the
    most-recently-admitted running request is paused and its KV released.
    Paused requests keep their progress and are re-admitted ahead of waiting
    ones without another prefill.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

from .model import ReplicaConfig, SimRequest


class SchedulerError(Exception):
    pass


class OverloadedError(SchedulerError):
    """Waiting queue is at its admission limit."""


class RequestTooLargeError(SchedulerError):
    """Request budget exceeds the replica's KV capacity."""


class Active:
    """Scheduler-side record of one request."""

    __slots__ = (
        "req", "generated", "kv_held", "prefilled", "admit_seq",
        "t_start", "t_first", "t_last", "pauses",
    )

    def __init__(self, req: SimRequest):
        self.req = req
        self.generated = 0
        self.kv_held = 0
        self.prefilled = False
        self.admit_seq = -1
        self.t_start: Optional[int] = None
        self.t_first: Optional[int] = None
        self.t_last: Optional[int] = None
        self.pauses = 0

    @property
    def request_id(self) -> str:
        return self.req.request_id

    @property
    def remaining(self) -> int:
        return self.req.target_output_tokens - self.generated

    def __repr__(self) -> str:
        return f"Active({self.req.request_id!r}, {self.generated}/{self.req.target_output_tokens})"


@dataclass(frozen=True)
class IterationPlan:
    duration_ns: int
    batch: int
    admitted: tuple[str, ...]
    paused: tuple[str, ...]


@dataclass(frozen=True)
class EngineStats:
    inflight: int
    running: int
    waiting: int
    paused: int
    kv_used_tokens: int
    completed: int

    @property
    def batch_size(self) -> int:
        return self.running


class BatchScheduler:
    def __init__(self, config: ReplicaConfig):
        self.config = config
        self.capacity = config.kv_capacity_tokens
        self.max_batch = config.max_batch
        self.model = config.latency_model
        self.guaranteed = config.kv_policy == "guaranteed"
        self.running: list[Active] = []
        self.waiting: deque[Active] = deque()
        self.paused: list[Active] = []
        self.kv_used = 0
        self.completed = 0
        self.iterations = 0
        self._admit_counter = 0
        self._planned: Optional[IterationPlan] = None
        self._iteration_start: Optional[int] = None

    # -- submission -------------------------------------------------------

    def submit(self, req: SimRequest) -> Active:
        if req.kv_budget > self.capacity:
            raise RequestTooLargeError(
                f"{req.request_id}: budget {req.kv_budget} > kv capacity {self.capacity}"
            )
        limit = self.config.max_waiting
        if limit is not None and len(self.waiting) >= limit:
            raise OverloadedError(f"waiting queue full ({limit})")
        a = Active(req)
        self.waiting.append(a)
        return a

    def cancel(self, request_id: str) -> bool:
        """Drop a request wherever it is; frees its KV.  Returns False if unknown."""
        for i, a in enumerate(self.running):
            if a.request_id == request_id:
                del self.running[i]
                self.kv_used -= a.kv_held
                a.kv_held = 0
                return True
        for queue in (self.waiting, self.paused):
            for a in queue:
                if a.request_id == request_id:
                    queue.remove(a)
                    return True
        return False

    # -- stepping ---------------------------------------------------------

    def has_work(self) -> bool:
        return bool(self.running or self.waiting or self.paused)

    def _reservation(self, a: Active) -> int:
        if self.guaranteed:
            return a.req.prompt_token_count + a.req.target_output_tokens
        return a.req.prompt_token_count + a.generated

    def _fits(self, a: Active) -> bool:
        extra = self._reservation(a)
        if self.guaranteed:
            return self.kv_used + extra <= self.capacity
        # the admitted request and everything already running each grow by one token
        return self.kv_used + extra + len(self.running) + 1 <= self.capacity

    def _pause_for_growth(self) -> list[str]:
        paused = []
        while self.running and self.kv_used + len(self.running) > self.capacity:
            victim = max(self.running, key=lambda x: x.admit_seq)
            self.running.remove(victim)
            self.kv_used -= victim.kv_held
            victim.kv_held = 0
            victim.pauses += 1
            self.paused.append(victim)
            paused.append(victim.request_id)
        return paused

    def plan(self, now_ns: int = 0) -> IterationPlan:
        """Admit work and size the next iteration.  Zero duration means idle."""
        paused = [] if self.guaranteed else self._pause_for_growth()
        admitted = []
        prefill = 0
        while len(self.running) < self.max_batch:
            if self.paused:
                cand, from_paused = self.paused[-1], True
            elif self.waiting:
                cand, from_paused = self.waiting[0], False
            else:
                break
            if not self._fits(cand):
                break
            if from_paused:
                self.paused.pop()
            else:
                self.waiting.popleft()
            cand.kv_held = self._reservation(cand)
            self.kv_used += cand.kv_held
            cand.admit_seq = self._admit_counter
            self._admit_counter += 1
            if not cand.prefilled:
                prefill += self.model.prefill_ns(cand.req.prompt_token_count)
                cand.prefilled = True
                cand.t_start = now_ns
            self.running.append(cand)
            admitted.append(cand.request_id)

        duration = prefill + self.model.decode_ns(len(self.running)) if self.running else 0
        plan = IterationPlan(duration, len(self.running), tuple(admitted), tuple(paused))
        self._planned = plan
        self._iteration_start = now_ns
        return plan

    def commit(self, now_ns: int) -> tuple[list[Active], list[Active]]:
        """Finish the planned iteration: every running request emits one token.

        Returns ``(emitted, finished)``; ``a.generated`` is the sequence number
        of the token each emitted request just produced.
        """
        self._planned = None
        if not self.running:
            return [], []
        emitted = self.running
        still: list[Active] = []
        finished: list[Active] = []
        grow = not self.guaranteed
        for a in emitted:
            a.generated += 1
            if a.t_first is None:
                a.t_first = now_ns
            a.t_last = now_ns
            if grow:
                a.kv_held += 1
                self.kv_used += 1
            if a.generated >= a.req.target_output_tokens:
                self.kv_used -= a.kv_held
                a.kv_held = 0
                finished.append(a)
            else:
                still.append(a)
        self.running = still
        self.completed += len(finished)
        self.iterations += 1
        return emitted, finished

    def step(self, now_ns: int) -> tuple[int, list[Active], list[Active]]:
        """Plan and commit one iteration starting at ``now_ns``."""
        plan = self.plan(now_ns)
        if not self.running:
            return 0, [], []
        emitted, finished = self.commit(now_ns + plan.duration_ns)
        return plan.duration_ns, emitted, finished

    def stats(self) -> EngineStats:
        return EngineStats(
            inflight=len(self.running) + len(self.waiting) + len(self.paused),
            running=len(self.running),
            waiting=len(self.waiting),
            paused=len(self.paused),
            kv_used_tokens=self.kv_used,
            completed=self.completed,
        )


_VOCAB = (
    "the of and to in is that for it as with was on be by this are from at or an "
    "which have not can all more one their were will been would has there when what "
    "some other into time only could new these two may first also after any most over "
    "such where through made many well should used each those both between under high"
).split()


def _mix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def token_text(seed: int, seq_no: int) -> str:
    """Synthetic token content, a pure function of (seed, seq_no)."""
    return " " + _VOCAB[_mix64((seed << 20) ^ seq_no) % len(_VOCAB)]


def sampled_length(seed: int, low: int, high: int) -> int:
    """Deterministic output length in ``[low, high]`` for a request seed."""
    if high <= low:
        return max(1, high)
    return low + _mix64(seed ^ 0x5DEECE66D) % (high - low + 1)
