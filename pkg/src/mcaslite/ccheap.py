"""Crash-consistent programming toolkit: undo log + persistent heap.

The heap lives inside arena extents handed to it at open.  Every metadata
mutation (free/live tables, root fields) is preceded by a copy-off record
into a bounded undo log; recovery replays outstanding records newest-first
so the pre-transaction image wins.  Callers mutating heap payload follow
the same discipline through `record`.

Metadata layout at the start of the first extent::

    0    magic        u64  "CCHEAP01"
    8    root_ref     u64  (0 = unset)
    16   root_len     u64
    24   table_cap    u64
    32   log armed    u64
    40   log count    u64
    64   log entries  LOG_ENTRIES x (offset u64, length u64, bytes[LOG_SAVE])
    ...  free table   table_cap x (offset u64, length u64)   length 0 = empty
    ...  live table   table_cap x (offset u64, length u64)
    ...  payload (64-byte aligned)

Tables are kept unsorted on media; address order for the first-fit policy
is a volatile index rebuilt on open.  Allocations are rounded to 64 bytes.

Arming order: entry bytes, then entry count, then the armed flag, each
persisted before the next; the armed flag is cleared first on commit.  A
crash at any point therefore sees either a disarmed (semantically empty)
log or a fully valid prefix, and recovery is idempotent.
"""

from __future__ import annotations

import bisect
import struct
from typing import Optional

from .errors import (
    BadFreeError,
    CorruptHeaderError,
    LogFullError,
    NoSpaceError,
    RangeError,
)

MAGIC = b"CCHEAP01"
LOG_ENTRIES = 64
LOG_SAVE = 4096
ENTRY_SIZE = 16 + LOG_SAVE
ALLOC_ALIGN = 64

_HDR = struct.Struct("<8sQQQ")  # magic, root_ref, root_len, table_cap
_PAIR = struct.Struct("<QQ")

_ARMED_OFF = 32
_COUNT_OFF = 40
_LOG_OFF = 64


def _round(size: int) -> int:
    return max((size + ALLOC_ALIGN - 1) & ~(ALLOC_ALIGN - 1), ALLOC_ALIGN)


class UndoLog:
    """Bounded copy-off journal at a fixed arena offset."""

    def __init__(self, arena, base: int):
        self.arena = arena
        self.base = base
        self.armed = False
        self.count = 0
        self.open_txn = False  # explicit begin() before the first record

    def begin(self) -> None:
        self.open_txn = True

    @property
    def in_txn(self) -> bool:
        return self.armed or self.open_txn

    def load(self) -> None:
        self.armed = self.arena.read_u64(self.base + _ARMED_OFF) != 0
        self.count = self.arena.read_u64(self.base + _COUNT_OFF)

    def record(self, offset: int, length: int) -> None:
        """Durably save the current bytes of [offset, offset+length)."""
        arena = self.arena
        pos = offset
        end = offset + length
        while pos < end:
            n = min(LOG_SAVE, end - pos)
            if self.count >= LOG_ENTRIES:
                raise LogFullError("undo log full; roll back and retry")
            slot = self.base + _LOG_OFF + self.count * ENTRY_SIZE
            arena.write(slot, _PAIR.pack(pos, n) + arena.read(pos, n))
            arena.persist(slot, 16 + n)
            self.count += 1
            arena.write_u64(self.base + _COUNT_OFF, self.count)
            arena.persist(self.base + _COUNT_OFF, 8)
            if not self.armed:
                arena.write_u64(self.base + _ARMED_OFF, 1)
                arena.persist(self.base + _ARMED_OFF, 8)
                self.armed = True
            pos += n

    def _restore(self) -> None:
        arena = self.arena
        for i in range(self.count - 1, -1, -1):
            slot = self.base + _LOG_OFF + i * ENTRY_SIZE
            off, length = _PAIR.unpack(arena.read(slot, 16))
            arena.write(off, arena.read(slot + 16, length))
            arena.persist(off, length)

    def _disarm(self) -> None:
        arena = self.arena
        arena.write_u64(self.base + _ARMED_OFF, 0)
        arena.persist(self.base + _ARMED_OFF, 8)
        arena.write_u64(self.base + _COUNT_OFF, 0)
        arena.persist(self.base + _COUNT_OFF, 8)
        self.armed = False
        self.count = 0
        self.open_txn = False

    def commit(self) -> None:
        self._disarm()

    def rollback(self) -> None:
        self._restore()
        self._disarm()

    def recover(self) -> None:
        self.load()
        if self.armed:
            self.rollback()
        else:
            self.count = 0


class CcHeap:
    """Reconstitutable persistent heap with a root object."""

    def __init__(self, arena, regions: list[tuple[int, int]]):
        if not regions:
            raise RangeError("heap needs at least one region")
        self.arena = arena
        self.regions = sorted(regions)
        self.base = self.regions[0][0]
        total = sum(length for _, length in regions)
        self.table_cap = min(16384, max(1024, total // 2048))
        self._free_off = self.base + _LOG_OFF + LOG_ENTRIES * ENTRY_SIZE
        self._live_off = self._free_off + self.table_cap * 16
        meta_end = self._live_off + self.table_cap * 16
        payload_start = (meta_end + ALLOC_ALIGN - 1) & ~(ALLOC_ALIGN - 1)
        first_off, first_len = self.regions[0]
        if payload_start >= first_off + first_len:
            raise RangeError("first region too small for heap metadata")
        self._extents = [(payload_start, first_off + first_len - payload_start)]
        self._extents += self.regions[1:]
        self.extra_ranges: list[tuple[int, int]] = []  # recordable, non-heap
        self.log = UndoLog(arena, self.base)
        # volatile indexes over the persistent tables
        self._free_rows: dict[int, tuple[int, int]] = {}     # row -> (off, len)
        self._free_starts: list[int] = []                    # sorted offsets
        self._free_by_start: dict[int, int] = {}             # off -> row
        self._free_by_end: dict[int, int] = {}               # off+len -> row
        self._live_rows: dict[int, tuple[int, int]] = {}
        self._live_by_off: dict[int, int] = {}
        self._spare_free: list[int] = []
        self._spare_live: list[int] = []

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def open(cls, arena, regions: list[tuple[int, int]], fresh: bool) -> "CcHeap":
        heap = cls(arena, regions)
        if fresh:
            heap._format()
        else:
            heap._recover()
        return heap

    def _format(self) -> None:
        arena = self.arena
        arena.write(self.base, _HDR.pack(MAGIC, 0, 0, self.table_cap))
        arena.write(self.base + _ARMED_OFF, bytes(16))
        zeros = bytes(min(self.table_cap * 16, 1 << 20))
        for off in (self._free_off, self._live_off):
            pos, end = off, off + self.table_cap * 16
            while pos < end:
                n = min(len(zeros), end - pos)
                arena.write(pos, zeros[:n])
                pos += n
        for i, (off, length) in enumerate(self._extents):
            arena.write(self._free_off + i * 16, _PAIR.pack(off, length))
        arena.persist(self.base, self._live_off + self.table_cap * 16 - self.base)
        self._reload()

    def _recover(self) -> None:
        magic, _root, _rlen, cap = _HDR.unpack(self.arena.read(self.base, _HDR.size))
        if magic != MAGIC:
            raise CorruptHeaderError("not a cc-heap")
        if cap != self.table_cap:
            raise CorruptHeaderError("cc-heap geometry mismatch")
        self.log.recover()
        self._reload()

    def _reload(self) -> None:
        """Rebuild the volatile indexes from the persistent tables."""
        self._free_rows.clear()
        self._free_starts = []
        self._free_by_start.clear()
        self._free_by_end.clear()
        self._live_rows.clear()
        self._live_by_off.clear()
        spare_free, spare_live = [], []
        free_raw = self.arena.read(self._free_off, self.table_cap * 16)
        live_raw = self.arena.read(self._live_off, self.table_cap * 16)
        for i in range(self.table_cap):
            off, length = _PAIR.unpack_from(free_raw, i * 16)
            if length:
                self._index_free(i, off, length)
            else:
                spare_free.append(i)
            off, length = _PAIR.unpack_from(live_raw, i * 16)
            if length:
                self._live_rows[i] = (off, length)
                self._live_by_off[off] = i
            else:
                spare_live.append(i)
        spare_free.reverse()
        spare_live.reverse()
        self._spare_free = spare_free
        self._spare_live = spare_live

    # -- transactions --------------------------------------------------------

    def record(self, offset: int, length: int) -> None:
        if length <= 0 or not self._in_heap(offset, length):
            raise RangeError(f"record [{offset}, +{length}) outside heap")
        self.log.record(offset, length)

    def commit(self) -> None:
        self.log.commit()

    def rollback(self) -> None:
        self.log.rollback()
        self._reload()

    def _in_heap(self, offset: int, length: int) -> bool:
        for off, ln in self.regions:
            if off <= offset and offset + length <= off + ln:
                return True
        for off, ln in self.extra_ranges:
            if off <= offset and offset + length <= off + ln:
                return True
        return False

    # -- free/live table rows (media writes always under the log) -------------

    def _index_free(self, row: int, off: int, length: int) -> None:
        self._free_rows[row] = (off, length)
        bisect.insort(self._free_starts, off)
        self._free_by_start[off] = row
        self._free_by_end[off + length] = row

    def _unindex_free(self, row: int) -> None:
        off, length = self._free_rows.pop(row)
        self._free_starts.remove(off)
        del self._free_by_start[off]
        del self._free_by_end[off + length]

    def _write_free_row(self, row: int, off: int, length: int) -> None:
        slot = self._free_off + row * 16
        self.log.record(slot, 16)
        self.arena.write(slot, _PAIR.pack(off, length))
        self.arena.persist(slot, 16)

    def _write_live_row(self, row: int, off: int, length: int) -> None:
        slot = self._live_off + row * 16
        self.log.record(slot, 16)
        self.arena.write(slot, _PAIR.pack(off, length))
        self.arena.persist(slot, 16)

    # -- allocation ------------------------------------------------------------

    def alloc(self, size: int) -> int:
        """First-fit allocation, rounded to 64 bytes; joins an open
        transaction if one is armed, else commits standalone."""
        if size <= 0:
            raise RangeError("alloc size must be > 0")
        standalone = not self.log.in_txn
        try:
            off = self._alloc_inner(_round(size))
        except Exception:
            if standalone and self.log.armed:
                self.rollback()
            raise
        if standalone:
            self.commit()
        return off

    def _alloc_inner(self, rounded: int) -> int:
        row = None
        for start in self._free_starts:
            cand = self._free_by_start[start]
            if self._free_rows[cand][1] >= rounded:
                row = cand
                break
        if row is None:
            raise NoSpaceError(f"no free extent of {rounded} bytes")
        if not self._spare_live:
            raise NoSpaceError("live table full")
        off, length = self._free_rows[row]
        self._unindex_free(row)
        if length == rounded:
            self._write_free_row(row, 0, 0)
            self._spare_free.append(row)
        else:
            self._write_free_row(row, off + rounded, length - rounded)
            self._index_free(row, off + rounded, length - rounded)
        live_row = self._spare_live.pop()
        self._write_live_row(live_row, off, rounded)
        self._live_rows[live_row] = (off, rounded)
        self._live_by_off[off] = live_row
        return off

    def free(self, offset: int) -> None:
        if offset not in self._live_by_off:
            raise BadFreeError(f"offset {offset} is not a live allocation")
        standalone = not self.log.in_txn
        try:
            self._free_inner(offset)
        except Exception:
            if standalone and self.log.armed:
                self.rollback()
            raise
        if standalone:
            self.commit()

    def _free_inner(self, offset: int) -> None:
        row = self._live_by_off.pop(offset)
        _, rounded = self._live_rows.pop(row)
        self._write_live_row(row, 0, 0)
        self._spare_live.append(row)
        prev = self._free_by_end.get(offset)
        nxt = self._free_by_start.get(offset + rounded)
        if prev is not None and nxt is not None:
            p_off, p_len = self._free_rows[prev]
            n_len = self._free_rows[nxt][1]
            self._unindex_free(prev)
            self._unindex_free(nxt)
            self._write_free_row(prev, p_off, p_len + rounded + n_len)
            self._index_free(prev, p_off, p_len + rounded + n_len)
            self._write_free_row(nxt, 0, 0)
            self._spare_free.append(nxt)
        elif prev is not None:
            p_off, p_len = self._free_rows[prev]
            self._unindex_free(prev)
            self._write_free_row(prev, p_off, p_len + rounded)
            self._index_free(prev, p_off, p_len + rounded)
        elif nxt is not None:
            n_len = self._free_rows[nxt][1]
            self._unindex_free(nxt)
            self._write_free_row(nxt, offset, rounded + n_len)
            self._index_free(nxt, offset, rounded + n_len)
        else:
            if not self._spare_free:
                raise NoSpaceError("free table full")
            row = self._spare_free.pop()
            self._write_free_row(row, offset, rounded)
            self._index_free(row, offset, rounded)

    # -- root object ----------------------------------------------------------

    def allocate_root(self, size: int) -> int:
        standalone = not self.log.in_txn
        try:
            off = self._alloc_inner(_round(size))
            self.log.record(self.base + 8, 16)
            self.arena.write(self.base + 8, _PAIR.pack(off, size))
            self.arena.persist(self.base + 8, 16)
        except Exception:
            if standalone and self.log.armed:
                self.rollback()
            raise
        if standalone:
            self.commit()
        return off

    def root(self) -> Optional[tuple[int, int]]:
        off, length = _PAIR.unpack(self.arena.read(self.base + 8, 16))
        return (off, length) if off else None

    # -- introspection ---------------------------------------------------------

    def live_allocations(self) -> list[tuple[int, int]]:
        return sorted(self._live_rows.values())

    def free_extents(self) -> list[tuple[int, int]]:
        return sorted(self._free_rows.values())

    def free_bytes(self) -> int:
        return sum(length for _, length in self._free_rows.values())
