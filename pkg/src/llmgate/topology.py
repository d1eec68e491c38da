"""Declarative replica topology + routing policy, shared by engine and router.

Example (YAML or JSON)::

    replicas:
      - id: tp8-0
        address: 127.0.0.1:9100
        tp: 8
        ep: 1
        gpus: 8
        kv_capacity: 400000
        max_batch: 64
        latency: {prefill_base_ms: 2.0, prefill_per_token_ms: 0.02,
                  decode_base_ms: 6.0, decode_per_batch_slot_ms: 0.2}
    policy:
      kind: dynamic_threshold
      threshold: 64
      low_pool: [tp8-0]
      high_pool: [tp2-0, tp2-1, tp2-2, tp2-3]
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import yaml

from .engine.model import ReplicaConfig
from .router.registry import RoutingPolicy


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    replicas: tuple[ReplicaConfig, ...]
    policy: RoutingPolicy = field(default_factory=RoutingPolicy)
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "replicas", tuple(self.replicas))
        if not self.replicas:
            raise TopologyError("topology has no replicas")
        ids = [r.replica_id for r in self.replicas]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise TopologyError(f"duplicate replica ids: {sorted(dupes)}")
        unknown = (self.policy.low_pool | self.policy.high_pool) - set(ids)
        if unknown:
            raise TopologyError(f"policy pools name unknown replicas: {sorted(unknown)}")

    @property
    def gpu_count(self) -> int:
        return sum(r.gpu_count for r in self.replicas)

    def replica(self, replica_id: str) -> ReplicaConfig:
        for r in self.replicas:
            if r.replica_id == replica_id:
                return r
        raise KeyError(replica_id)

    def with_addresses(self, addresses: dict[str, str]) -> "Topology":
        return replace(
            self,
            replicas=tuple(replace(r, address=addresses.get(r.replica_id, r.address)) for r in self.replicas),
        )

    def with_policy(self, policy: RoutingPolicy) -> "Topology":
        return replace(self, policy=policy)

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        try:
            replicas = tuple(ReplicaConfig.from_dict(r) for r in d["replicas"])
        except KeyError as e:
            raise TopologyError(f"missing field {e}") from None
        policy = RoutingPolicy.from_dict(d.get("policy") or {})
        return cls(replicas, policy, d.get("name", ""))

    def to_dict(self) -> dict:
        d = {"replicas": [r.to_dict() for r in self.replicas], "policy": self.policy.to_dict()}
        if self.name:
            d = {"name": self.name, **d}
        return d


def load_topology(path: Union[str, Path]) -> Topology:
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise TopologyError(f"{path}: expected a mapping at top level")
    return Topology.from_dict(data)


def dump_topology(topo: Topology, path: Union[str, Path]) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(topo.to_dict(), indent=2))
    else:
        path.write_text(yaml.safe_dump(topo.to_dict(), sort_keys=False))
