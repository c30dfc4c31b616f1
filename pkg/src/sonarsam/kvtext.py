"""Flat ``key = value`` text: one assignment per line, ``#`` starts a comment."""

from __future__ import annotations

from typing import Iterator

from .errors import ParseError


def parse_assignments(text: str) -> Iterator[tuple[int, str, str]]:
    """Yield ``(line number, key, value)``; blank and comment lines are skipped."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if not value:
            raise ParseError(f"missing value for {key!r}", lineno)
        yield lineno, key, value
