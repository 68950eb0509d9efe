"""Locate candidate condition names inside free model text."""

from __future__ import annotations

import re
from functools import lru_cache
from typing import Iterable, NamedTuple


class Mention(NamedTuple):
    start: int
    end: int
    name: str


@lru_cache(maxsize=1024)
def _name_pattern(name: str) -> re.Pattern[str]:
    words = [re.escape(w) for w in name.split()]
    return re.compile(r"(?<!\w)" + r"\s+".join(words) + r"(?!\w)", re.IGNORECASE)


def find_mentions(text: str, names: Iterable[str]) -> list[Mention]:
    """Non-overlapping mentions of ``names`` in ``text``, left to right.

    Where matches overlap the longer one wins, so "chronic eczema" is not
    also reported as "eczema".
    """
    found: list[Mention] = []
    for name in set(names):
        if not name.strip():
            continue
        for m in _name_pattern(name).finditer(text):
            found.append(Mention(m.start(), m.end(), name))
    chosen: list[Mention] = []
    taken: list[tuple[int, int]] = []
    for m in sorted(found, key=lambda m: (-(m.end - m.start), m.start, m.name)):
        if all(m.end <= s or m.start >= e for s, e in taken):
            chosen.append(m)
            taken.append((m.start, m.end))
    chosen.sort(key=lambda m: m.start)
    return chosen


_MARKUP = re.compile(r"[*_`]+")


def strip_markup(text: str) -> str:
    return _MARKUP.sub("", text).strip()
