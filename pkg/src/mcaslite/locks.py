"""Per-key lock records for ADO ownership.

A key is either read-shared (many holders) or write-exclusive (one).
Holders are work ids; every lock taken on behalf of a work joins its
deferred-unlock set and is dropped when that work completes, unless the
plugin released it early through the unlock callback.
"""

from __future__ import annotations

LOCK_READ = "read"
LOCK_WRITE = "write"


class LockTable:
    def __init__(self):
        self._locks: dict[bytes, tuple[str, set[int]]] = {}
        self._held: dict[int, set[bytes]] = {}  # work id -> keys

    def try_acquire(self, key: bytes, mode: str, holder: int) -> bool:
        rec = self._locks.get(key)
        if rec is None:
            self._locks[key] = (mode, {holder})
        else:
            cur_mode, holders = rec
            if holder in holders:
                if cur_mode == mode or cur_mode == LOCK_WRITE:
                    return True  # re-entrant; write covers read
                return False
            if cur_mode == LOCK_WRITE or mode == LOCK_WRITE:
                return False
            holders.add(holder)
        self._held.setdefault(holder, set()).add(key)
        return True

    def release(self, key: bytes, holder: int) -> bool:
        rec = self._locks.get(key)
        if rec is None or holder not in rec[1]:
            return False
        rec[1].discard(holder)
        if not rec[1]:
            del self._locks[key]
        held = self._held.get(holder)
        if held:
            held.discard(key)
            if not held:
                del self._held[holder]
        return True

    def release_all(self, holder: int) -> list[bytes]:
        """Drain the deferred-unlock set of a completed work."""
        keys = list(self._held.get(holder, ()))
        for key in keys:
            self.release(key, holder)
        return keys

    def is_locked(self, key: bytes, for_write: bool) -> bool:
        """Would acquiring this key in the given mode conflict?"""
        rec = self._locks.get(key)
        if rec is None:
            return False
        return for_write or rec[0] == LOCK_WRITE

    def mode_of(self, key: bytes) -> str | None:
        rec = self._locks.get(key)
        return rec[0] if rec else None

    def held_by(self, holder: int) -> set[bytes]:
        return set(self._held.get(holder, ()))

    def audit(self) -> dict[bytes, tuple[str, set[int]]]:
        return {k: (m, set(h)) for k, (m, h) in self._locks.items()}
