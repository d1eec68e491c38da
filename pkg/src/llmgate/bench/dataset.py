"""Prompt datasets: line-delimited JSON records with ``system`` and ``question``."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union


class DatasetError(ValueError):
    pass


class EmptyDatasetError(DatasetError):
    pass


@dataclass(frozen=True)
class PromptRecord:
    system: str
    question: str
    response: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("user prompt must be nonempty")

    def messages(self) -> list[dict]:
        msgs = []
        if self.system:
            msgs.append({"role": "system", "content": self.system})
        msgs.append({"role": "user", "content": self.question})
        return msgs

    @property
    def prompt_tokens(self) -> int:
        return max(1, len(self.system.split()) + len(self.question.split()))


def parse_records(lines: Iterable[str], source: str = "<input>") -> list[PromptRecord]:
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            if not isinstance(d, dict):
                raise ValueError("expected a JSON object")
            system = d.get("system", "")
            question = d["question"]
            if not isinstance(system, str) or not isinstance(question, str):
                raise ValueError("system and question must be strings")
            out.append(PromptRecord(system, question, d.get("response")))
        except (ValueError, KeyError, TypeError) as e:
            detail = f"missing field {e}" if isinstance(e, KeyError) else str(e)
            raise DatasetError(f"{source}:{lineno}: {detail}") from None
    return out


def load_dataset(
    path: Union[str, Path],
    total_requests: Optional[int] = None,
    seed: int = 0,
) -> list[PromptRecord]:
    """Parse a dataset file; with ``total_requests`` smaller than the file,
    return a seeded sample of that size (same seed, same sample)."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        records = parse_records(fh, str(path))
    if not records:
        raise EmptyDatasetError(f"{path}: no records")
    if total_requests is not None and len(records) > total_requests:
        idx = sorted(random.Random(seed).sample(range(len(records)), total_requests))
        records = [records[i] for i in idx]
    return records


def convert_openorca(src: Union[str, Path], dst: Union[str, Path], limit: Optional[int] = None) -> int:
    """Rewrite OpenOrca-style rows (``system_prompt``, ``question``, ``response``)
    from JSON lines into the harness format.  Returns the number written."""
    n = 0
    with Path(src).open(encoding="utf-8") as fin, Path(dst).open("w", encoding="utf-8") as fout:
        for lineno, line in enumerate(fin, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = {"system": d.get("system_prompt", d.get("system", "")), "question": d["question"]}
            except (ValueError, KeyError) as e:
                raise DatasetError(f"{src}:{lineno}: {e}") from None
            if "response" in d:
                rec["response"] = d["response"]
            if not rec["question"].strip():
                continue
            fout.write(json.dumps(rec) + "\n")
            n += 1
            if limit is not None and n >= limit:
                break
    return n


def synthetic_dataset(n: int, seed: int = 0) -> list[PromptRecord]:
    """Small deterministic stand-in when no dataset file is given."""
    rng = random.Random(seed)
    words = "explain describe compare list summarize the a of data model system network memory cache token".split()
    return [
        PromptRecord(
            "You are a helpful assistant.",
            " ".join(rng.choice(words) for _ in range(rng.randint(8, 64))) + "?",
        )
        for _ in range(n)
    ]
