"""Replica shape and the affine token-timing model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

DEFAULT_MAX_TOKENS = 512


def ms_to_ns(ms: float) -> int:
    return int(round(ms * 1_000_000))


@dataclass(frozen=True)
class LatencyModel:
    """Iteration timing: prefill p(L) = p0 + p1*L, decode d(b) = d0 + d1*b.

    Coefficients are given in milliseconds and held as integer nanoseconds so
    that virtual-clock schedules are exact.
    """

    prefill_base_ms: float = 0.0
    prefill_per_token_ms: float = 0.0
    decode_base_ms: float = 0.0
    decode_per_batch_slot_ms: float = 0.0

    def __post_init__(self) -> None:
        for name in ("prefill_base_ms", "prefill_per_token_ms", "decode_base_ms", "decode_per_batch_slot_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        object.__setattr__(self, "_p0", ms_to_ns(self.prefill_base_ms))
        object.__setattr__(self, "_p1", ms_to_ns(self.prefill_per_token_ms))
        object.__setattr__(self, "_d0", ms_to_ns(self.decode_base_ms))
        object.__setattr__(self, "_d1", ms_to_ns(self.decode_per_batch_slot_ms))

    def prefill_ns(self, prompt_tokens: int) -> int:
        return self._p0 + self._p1 * prompt_tokens

    def decode_ns(self, batch: int) -> int:
        return self._d0 + self._d1 * batch

    def batch_efficiency(self, batch: int) -> float:
        """Decode tokens per second at batch size ``batch``."""
        return batch * 1e9 / self.decode_ns(batch)

    def scaled(self, factor: float) -> "LatencyModel":
        return LatencyModel(
            self.prefill_base_ms * factor,
            self.prefill_per_token_ms * factor,
            self.decode_base_ms * factor,
            self.decode_per_batch_slot_ms * factor,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyModel":
        return cls(
            prefill_base_ms=float(d.get("prefill_base_ms", 0.0)),
            prefill_per_token_ms=float(d.get("prefill_per_token_ms", 0.0)),
            decode_base_ms=float(d.get("decode_base_ms", 0.0)),
            decode_per_batch_slot_ms=float(d.get("decode_per_batch_slot_ms", 0.0)),
        )

    def to_dict(self) -> dict:
        return {
            "prefill_base_ms": self.prefill_base_ms,
            "prefill_per_token_ms": self.prefill_per_token_ms,
            "decode_base_ms": self.decode_base_ms,
            "decode_per_batch_slot_ms": self.decode_per_batch_slot_ms,
        }


@dataclass(frozen=True)
class ReplicaConfig:
    replica_id: str
    tp_degree: int = 1
    ep_degree: int = 1
    gpu_count: Optional[int] = None
    latency_model: LatencyModel = field(default_factory=LatencyModel)
    kv_capacity_tokens: int = 1 << 20
    max_batch: int = 64
    max_waiting: Optional[int] = None
    kv_policy: str = "guaranteed"
    address: Optional[str] = None

    def __post_init__(self) -> None:
        if self.gpu_count is None:
            object.__setattr__(self, "gpu_count", self.tp_degree * self.ep_degree)
        for name in ("tp_degree", "ep_degree", "gpu_count", "kv_capacity_tokens", "max_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.tp_degree * self.ep_degree != self.gpu_count:
            raise ValueError(
                f"replica {self.replica_id}: tp {self.tp_degree} x ep {self.ep_degree} != gpus {self.gpu_count}"
            )
        if self.kv_policy not in ("guaranteed", "max_utilization"):
            raise ValueError(f"unknown kv_policy {self.kv_policy!r}")

    @property
    def label(self) -> str:
        if self.ep_degree > 1:
            return f"EP{self.ep_degree}-TP{self.tp_degree}"
        return f"TP{self.tp_degree}"

    @classmethod
    def from_dict(cls, d: dict) -> "ReplicaConfig":
        lm = d.get("latency") or d.get("latency_model") or {}
        return cls(
            replica_id=str(d["id"]),
            tp_degree=int(d.get("tp", 1)),
            ep_degree=int(d.get("ep", 1)),
            gpu_count=int(d["gpus"]) if "gpus" in d else None,
            latency_model=LatencyModel.from_dict(lm),
            kv_capacity_tokens=int(d.get("kv_capacity", 1 << 20)),
            max_batch=int(d.get("max_batch", 64)),
            max_waiting=d.get("max_waiting"),
            kv_policy=d.get("kv_policy", "guaranteed"),
            address=d.get("address"),
        )

    def to_dict(self) -> dict:
        d = {
            "id": self.replica_id,
            "tp": self.tp_degree,
            "ep": self.ep_degree,
            "gpus": self.gpu_count,
            "kv_capacity": self.kv_capacity_tokens,
            "max_batch": self.max_batch,
            "kv_policy": self.kv_policy,
            "latency": self.latency_model.to_dict(),
        }
        if self.max_waiting is not None:
            d["max_waiting"] = self.max_waiting
        if self.address is not None:
            d["address"] = self.address
        return d


@dataclass(frozen=True)
class SimRequest:
    request_id: str
    prompt_token_count: int
    target_output_tokens: int = DEFAULT_MAX_TOKENS
    seed: int = 0

    def __post_init__(self) -> None:
        if self.prompt_token_count < 1:
            raise ValueError("prompt_token_count must be >= 1")
        if self.target_output_tokens < 1:
            raise ValueError("target_output_tokens must be >= 1")

    @property
    def kv_budget(self) -> int:
        return self.prompt_token_count + self.target_output_tokens
