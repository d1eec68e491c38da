"""Append-only JSON-lines persistence of per-request observations."""

from __future__ import annotations

import datetime as dt
import json
import logging
import queue
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, TextIO, Union

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObservationRecord:
    request_id: str
    status: str
    replica_id: Optional[str] = None
    api_key_id: Optional[str] = None
    n_tokens: int = 0
    t1: Optional[int] = None
    t2: Optional[int] = None
    t3: Optional[int] = None
    t4: Optional[int] = None
    t5: Optional[int] = None
    t_done: Optional[int] = None
    http_status: int = 200
    reason: Optional[str] = None
    attempts: int = 0
    stream: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "ObservationRecord":
        return cls(**json.loads(line))


_STOP = object()


class ObservationSink:
    """Single writer thread fed by a queue.

    Files are named ``observations-YYYY-MM-DD.jsonl`` after the UTC date and
    rotate when it changes.  Every record is flushed.  Write errors are
    logged and counted, never raised to callers.
    """

    def __init__(
        self,
        directory: Union[str, Path],
        today: Callable[[], dt.date] = lambda: dt.datetime.now(dt.timezone.utc).date(),
        opener: Callable[[Path], TextIO] = lambda p: open(p, "a", encoding="utf-8"),
    ):
        self.directory = Path(directory)
        self.today = today
        self.opener = opener
        self.written = 0
        self.errors = 0
        self._q: "queue.Queue" = queue.Queue()
        self._fh: Optional[TextIO] = None
        self._day: Optional[dt.date] = None
        self._thread = threading.Thread(target=self._run, name="observation-sink", daemon=True)
        self._thread.start()

    def path_for(self, day: dt.date) -> Path:
        return self.directory / f"observations-{day.isoformat()}.jsonl"

    def persist(self, rec: ObservationRecord) -> None:
        self._q.put(rec)

    def flush(self, timeout: Optional[float] = None) -> None:
        """Block until everything queued so far has been handled."""
        done = threading.Event()
        self._q.put(done)
        done.wait(timeout)

    def close(self) -> None:
        if self._thread.is_alive():
            self._q.put(_STOP)
            self._thread.join(timeout=5)
        self._close_file()

    def _close_file(self) -> None:
        if self._fh is not None:
            try:
                self._fh.close()
            except OSError:
                pass
            self._fh = None

    def _write(self, rec: ObservationRecord) -> None:
        day = self.today()
        if self._fh is None or day != self._day:
            self._close_file()
            self.directory.mkdir(parents=True, exist_ok=True)
            self._fh = self.opener(self.path_for(day))
            self._day = day
        self._fh.write(rec.to_json() + "\n")
        self._fh.flush()

    def _run(self) -> None:
        while True:
            item = self._q.get()
            if item is _STOP:
                return
            if isinstance(item, threading.Event):
                item.set()
                continue
            try:
                self._write(item)
                self.written += 1
            except Exception as e:
                self.errors += 1
                self._close_file()
                log.warning("dropping observation %s: %s", getattr(item, "request_id", "?"), e)


def read_observations(directory: Union[str, Path]) -> list[ObservationRecord]:
    out = []
    for path in sorted(Path(directory).glob("observations-*.jsonl")):
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                out.append(ObservationRecord.from_json(line))
    return out
