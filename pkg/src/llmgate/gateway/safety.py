"""Blocklist content filter for prompts and generated output."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional, Union

INPUT = "input"
OUTPUT = "output"


class ContentFilter:
    """Case-insensitive substring match; reports the first listed term found."""

    def __init__(self, terms: Iterable[str] = ()):
        self.terms = [t for t in (s.strip() for s in terms) if t]
        self._folded = [t.casefold() for t in self.terms]
        self._longest = max((len(t) for t in self._folded), default=0)

    def __bool__(self) -> bool:
        return bool(self.terms)

    def check(self, text: str, direction: str = INPUT) -> Optional[str]:
        """Return the matched term, or None when the text passes."""
        if direction not in (INPUT, OUTPUT):
            raise ValueError(f"direction must be input or output, got {direction!r}")
        if not self._folded:
            return None
        folded = text.casefold()
        for term, f in zip(self.terms, self._folded):
            if f in folded:
                return term
        return None

    def stream(self) -> "StreamFilter":
        return StreamFilter(self)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ContentFilter":
        """One term per line; blank lines and ``#`` comments ignored."""
        lines = Path(path).read_text().splitlines()
        return cls(line for line in lines if not line.lstrip().startswith("#"))


class StreamFilter:
    """Output filter over a chunked stream; catches terms split across chunks."""

    def __init__(self, f: ContentFilter):
        self.f = f
        self._tail = ""

    def feed(self, chunk: str) -> Optional[str]:
        if not self.f:
            return None
        window = self._tail + chunk
        hit = self.f.check(window, OUTPUT)
        keep = max(self.f._longest - 1, 0)
        self._tail = window[-keep:] if keep else ""
        return hit


def content_filter(f: ContentFilter, text: str, direction: str = INPUT) -> Optional[str]:
    return f.check(text, direction)
