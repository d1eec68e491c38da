"""API-key authentication against a store of key hashes."""

from __future__ import annotations

import hashlib
import hmac
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import yaml


class AuthError(Exception):
    status = 401
    code = "invalid_api_key"


class MissingHeaderError(AuthError):
    code = "missing_authorization"


class UnknownKeyError(AuthError):
    pass


class DisabledKeyError(AuthError):
    code = "disabled_api_key"


def hash_key(key: str) -> str:
    return hashlib.sha256(key.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ApiKeyRecord:
    key_id: str
    key_hash: str
    requests_per_second: float = 10.0
    burst: int = 20
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.requests_per_second <= 0 or self.burst < 1:
            raise ValueError(f"{self.key_id}: rate must be > 0 and burst >= 1")


class KeyStore:
    def __init__(self, records: Iterable[ApiKeyRecord] = ()):
        self._records = list(records)
        self._by_id = {r.key_id: r for r in self._records}

    def __len__(self) -> int:
        return len(self._records)

    def get(self, key_id: str) -> Optional[ApiKeyRecord]:
        return self._by_id.get(key_id)

    def add(self, record: ApiKeyRecord) -> None:
        self._records.append(record)
        self._by_id[record.key_id] = record

    def authenticate(self, header: Optional[str]) -> ApiKeyRecord:
        """Resolve an ``Authorization: Bearer <key>`` header to its record."""
        if not header:
            raise MissingHeaderError("missing Authorization header")
        scheme, _, token = header.strip().partition(" ")
        token = token.strip()
        if scheme.lower() != "bearer" or not token:
            raise MissingHeaderError("Authorization header must be 'Bearer <key>'")
        presented = hash_key(token).encode()
        found = None
        # scan every record so timing does not depend on which one matched
        for rec in self._records:
            if hmac.compare_digest(presented, rec.key_hash.encode()):
                found = rec
        if found is None:
            raise UnknownKeyError("unknown API key")
        if not found.enabled:
            raise DisabledKeyError(f"API key {found.key_id} is disabled")
        return found

    @classmethod
    def from_dicts(cls, items: Iterable[dict]) -> "KeyStore":
        recs = []
        for d in items:
            key_hash = d.get("key_sha256") or hash_key(d["key"])
            recs.append(
                ApiKeyRecord(
                    key_id=str(d.get("id", key_hash[:8])),
                    key_hash=key_hash,
                    requests_per_second=float(d.get("rps", d.get("requests_per_second", 10.0))),
                    burst=int(d.get("burst", 20)),
                    enabled=bool(d.get("enabled", True)),
                )
            )
        return cls(recs)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "KeyStore":
        """Load ``{"keys": [{id, key_sha256 | key, rps, burst, enabled}]}`` from YAML/JSON."""
        path = Path(path)
        text = path.read_text()
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        items = data.get("keys", []) if isinstance(data, dict) else data
        return cls.from_dicts(items or [])


def authenticate(store: KeyStore, header: Optional[str]) -> ApiKeyRecord:
    return store.authenticate(header)
