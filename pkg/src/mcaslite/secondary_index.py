"""Ordered key index per pool: exact, prefix, and regex scans.

Volatile by design; on attach (and so after restart) the index bulk-loads
from the primary index and is maintained by subsequent put/erase.  Scan
positions are opaque resume tokens: empty means start-of-keyspace,
otherwise scanning continues strictly after the token, so interleaved
mutations never make a scan skip or repeat a surviving key.

Regex dialect: the documented subset is literals, '.', '*', and character
classes; patterns are compiled with the host regex engine and must match
the whole key.
"""

from __future__ import annotations

import bisect
import re

from .errors import BadRegexError, NoMatchError

MATCH_EXACT = 0
MATCH_PREFIX = 1
MATCH_REGEX = 2

MATCH_KINDS = {MATCH_EXACT: "exact", MATCH_PREFIX: "prefix",
               MATCH_REGEX: "regex"}


class SecondaryIndex:
    def __init__(self, keys=()):
        self._keys: list[bytes] = sorted(keys)

    def add(self, key: bytes) -> None:
        i = bisect.bisect_left(self._keys, key)
        if i == len(self._keys) or self._keys[i] != key:
            self._keys.insert(i, key)

    def discard(self, key: bytes) -> None:
        i = bisect.bisect_left(self._keys, key)
        if i < len(self._keys) and self._keys[i] == key:
            self._keys.pop(i)

    def __len__(self) -> int:
        return len(self._keys)

    def keys(self) -> list[bytes]:
        return list(self._keys)

    def find(self, expression: bytes, kind: int,
             position: bytes = b"") -> tuple[bytes, bytes]:
        """First key matching `expression` strictly after `position`
        (or from the start when the position is empty); returns the key
        and the resume token for the next call."""
        if kind == MATCH_REGEX:
            try:
                pattern = re.compile(expression)
            except re.error as exc:
                raise BadRegexError(str(exc)) from None
            match = pattern.fullmatch
        elif kind == MATCH_PREFIX:
            match = lambda k: k.startswith(expression)
        elif kind == MATCH_EXACT:
            match = lambda k: k == expression
        else:
            raise BadRegexError(f"unknown match kind {kind}")
        start = 0
        if position:
            start = bisect.bisect_right(self._keys, position)
        for i in range(start, len(self._keys)):
            key = self._keys[i]
            if match(key):
                return key, key
        raise NoMatchError("end of scan")
