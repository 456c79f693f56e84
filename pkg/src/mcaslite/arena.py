"""Per-shard persistent byte space and the coarse region allocator.

On-media layout (little-endian throughout)::

    [0, 4096)         header page
        0   magic            4s   = b"MCA1"
        4   version          u32  = 1
        8   capacity         u64  (file size in bytes)
        16  region table     u64  offset (= 4096)
        24  undo log         u64  offset
        32  pool directory   u64  offset
        40  region count     u64  (payload regions only)
    region table          region_count x (offset u64, length u64, owner u64)
    undo log              valid u64, saved_offset u64, saved_length u64,
                          image[region_count * 24]
    pool directory        64 x (state u64, pool_id u64, first_region u64,
                          name_len u64, name[96])

Memory is handed out in 32 MiB regions.  Region zero holds all of the
metadata above; payload regions start at offset 32 MiB.  Mutations of the
region table are made write-atomic with the undo log: the pre-image of the
whole table is persisted and validated before any row changes, so a crash
at any point recovers to either the old or the new table.

Two backends implement the byte space: a memory-mapped file (production)
and a crash-simulating buffer used by tests.  The simulator tracks dirty
64-byte lines; a materialized crash state is the committed image plus an
arbitrary subset of the still-pending lines, which models persistence
requiring an explicit flush.
"""

from __future__ import annotations

import itertools
import mmap
import os
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional

from .errors import (
    BadCapacityError,
    CorruptHeaderError,
    NoSpaceError,
    RangeError,
    UnknownPoolError,
)

MAGIC = b"MCA1"
FORMAT_VERSION = 1
REGION_SIZE = 32 * 1024 * 1024
MIN_CAPACITY = 64 * 1024 * 1024
HEADER_PAGE = 4096
LINE = 64

OWNER_FREE = 0

POOL_DIR_SLOTS = 64
POOL_DIR_ENTRY = 128
POOL_NAME_MAX = 96
POOL_EMPTY, POOL_LIVE, POOL_DEAD = 0, 1, 2

_HDR = struct.Struct("<4sIQQQQQ")
_ROW = struct.Struct("<QQQ")
_U64 = struct.Struct("<Q")
_DIR = struct.Struct("<QQQQ")

ZERO_LINE = bytes(LINE)


class CrashPoint(BaseException):
    """Raised by an event hook to simulate power loss at a store/flush.

    Deliberately not an Exception: a real crash gives rollback handlers
    no chance to run, so none of the library's `except Exception` paths
    may intercept this either."""


class MappedFileBackend:
    """fs-DAX-style backing: a sparse file accessed through mmap."""

    def __init__(self, path: str, capacity: int, create: bool):
        self.path = path
        self.capacity = capacity
        flags = os.O_RDWR | (os.O_CREAT if create else 0)
        self._fd = os.open(path, flags, 0o644)
        if os.fstat(self._fd).st_size < capacity:
            os.ftruncate(self._fd, capacity)
        self._mm = mmap.mmap(self._fd, capacity)

    def read(self, offset: int, length: int) -> bytes:
        return self._mm[offset:offset + length]

    def write(self, offset: int, data: bytes) -> None:
        self._mm[offset:offset + len(data)] = data

    def persist(self, offset: int, length: int) -> None:
        page = mmap.PAGESIZE
        start = offset & ~(page - 1)
        end = min(self.capacity, (offset + length + page - 1) & ~(page - 1))
        self._mm.flush(start, end - start)

    def zero(self, offset: int, length: int) -> None:
        self._mm[offset:offset + length] = bytes(length)
        self.persist(offset, length)

    def close(self) -> None:
        self._mm.flush()
        self._mm.close()
        os.close(self._fd)


class CrashSimBackend:
    """Test backing with explicit-flush semantics at 64-byte line granularity.

    `working` is what a running process sees.  `committed` holds only the
    lines known flushed; everything else materializes as zero.  A crash
    state is `committed` plus any subset of the pending (dirty) lines.
    Lines that flush back to all-zero are dropped from `committed`, so a
    zero-filled region costs nothing.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        # anonymous mapping: zero pages materialize lazily, so large
        # sparsely-touched arenas cost nothing to create
        self.working = mmap.mmap(-1, capacity)
        self.pending: set[int] = set()
        self.committed: dict[int, bytes] = {}
        self.event_hook: Optional[Callable[[str, int, int], None]] = None

    def read(self, offset: int, length: int) -> bytes:
        return bytes(self.working[offset:offset + length])

    def write(self, offset: int, data: bytes) -> None:
        if self.event_hook is not None:
            self.event_hook("write", offset, len(data))
        self.working[offset:offset + len(data)] = data
        self.pending.update(range(offset // LINE, (offset + len(data) - 1) // LINE + 1))

    def persist(self, offset: int, length: int) -> None:
        if self.event_hook is not None:
            self.event_hook("persist", offset, length)
        first = offset // LINE
        last = (offset + length - 1) // LINE
        pending = self.pending
        committed = self.committed
        working = self.working
        for line in range(first, last + 1):
            if line in pending:
                pending.discard(line)
                img = bytes(working[line * LINE:(line + 1) * LINE])
                if img == ZERO_LINE:
                    committed.pop(line, None)
                else:
                    committed[line] = img

    def zero(self, offset: int, length: int) -> None:
        """Zero-fill and commit a line-aligned range in one step; the
        range drops out of both pending and committed tracking (absent
        lines materialize as zero)."""
        if self.event_hook is not None:
            self.event_hook("write", offset, length)
        self.working[offset:offset + length] = bytes(length)
        first = offset // LINE
        last = (offset + length - 1) // LINE
        drop = [ln for ln in self.pending if first <= ln <= last]
        self.pending.difference_update(drop)
        dropc = [ln for ln in self.committed if first <= ln <= last]
        for ln in dropc:
            del self.committed[ln]
        if self.event_hook is not None:
            self.event_hook("persist", offset, length)

    def close(self) -> None:
        pass

    # -- crash-state materialization ------------------------------------

    def pending_lines(self) -> frozenset[int]:
        return frozenset(self.pending)

    def materialize(self, keep: Iterable[int] = ()) -> "CrashSimBackend":
        """Return the post-crash backing keeping only `keep` pending lines."""
        img = CrashSimBackend(self.capacity)
        work = img.working
        for line, data in self.committed.items():
            work[line * LINE:(line + 1) * LINE] = data
        img.committed = dict(self.committed)
        for line in keep:
            data = bytes(self.working[line * LINE:(line + 1) * LINE])
            work[line * LINE:(line + 1) * LINE] = data
            if data == ZERO_LINE:
                img.committed.pop(line, None)
            else:
                img.committed[line] = data
        return img

    def random_crash(self, rng) -> "CrashSimBackend":
        keep = [ln for ln in self.pending if rng.random() < 0.5]
        return self.materialize(keep)

    def all_crash_states(self) -> Iterator["CrashSimBackend"]:
        lines = sorted(self.pending)
        for r in range(len(lines) + 1):
            for keep in itertools.combinations(lines, r):
                yield self.materialize(keep)


@dataclass
class RegionDescriptor:
    offset: int
    length: int
    owner: int


@dataclass
class PoolDirEntry:
    slot: int
    state: int
    pool_id: int
    first_region: int
    name: bytes


class PersistentArena:
    """One shard's byte space plus its crash-consistent region table."""

    def __init__(self, backend, path: Optional[str] = None):
        self.backend = backend
        self.path = path
        self.capacity = backend.capacity
        self.region_count = self.capacity // REGION_SIZE - 1
        self._table_off = HEADER_PAGE
        self._table_len = self.region_count * _ROW.size
        self._undo_off = self._table_off + self._table_len
        self._undo_len = 24 + self._table_len
        self._dir_off = self._undo_off + self._undo_len
        # cached copy of the region table owners; media stays authoritative
        self._owners: list[int] = []

    # -- lifecycle -------------------------------------------------------

    @classmethod
    def create(cls, capacity: int, path: Optional[str] = None,
               backend: Optional[CrashSimBackend] = None) -> "PersistentArena":
        cls._check_capacity(capacity)
        if backend is None:
            backend = (MappedFileBackend(path, capacity, create=True)
                       if path else CrashSimBackend(capacity))
        arena = cls(backend, path)
        arena._format()
        return arena

    @classmethod
    def open(cls, path: Optional[str] = None,
             backend: Optional[CrashSimBackend] = None) -> "PersistentArena":
        """Recover an existing arena (replays the region-table undo log)."""
        if backend is None:
            if path is None or not os.path.exists(path):
                raise CorruptHeaderError("no such arena")
            capacity = os.stat(path).st_size
            cls._check_capacity(capacity)
            backend = MappedFileBackend(path, capacity, create=False)
        arena = cls(backend, path)
        arena._load_header()
        arena._recover()
        return arena

    @classmethod
    def open_or_create(cls, path: str, capacity: int) -> "PersistentArena":
        if os.path.exists(path) and os.stat(path).st_size >= HEADER_PAGE:
            with open(path, "rb") as fh:
                if fh.read(4) == MAGIC:
                    arena = cls.open(path)
                    arena.reclaim_orphans()
                    return arena
        cls._check_capacity(capacity)
        return cls.create(capacity, path)

    @staticmethod
    def _check_capacity(capacity: int) -> None:
        if capacity < MIN_CAPACITY or capacity % REGION_SIZE != 0:
            raise BadCapacityError(
                f"capacity {capacity} must be >= {MIN_CAPACITY} and a "
                f"multiple of {REGION_SIZE}")

    def close(self) -> None:
        self.backend.close()

    def _format(self) -> None:
        hdr = _HDR.pack(MAGIC, FORMAT_VERSION, self.capacity, self._table_off,
                        self._undo_off, self._dir_off, self.region_count)
        self.write(0, hdr)
        rows = bytearray()
        for i in range(self.region_count):
            rows += _ROW.pack((i + 1) * REGION_SIZE, REGION_SIZE, OWNER_FREE)
        self.write(self._table_off, bytes(rows))
        self.write(self._undo_off, bytes(24))
        self.write(self._dir_off, bytes(POOL_DIR_SLOTS * POOL_DIR_ENTRY))
        self.persist(0, self._dir_off + POOL_DIR_SLOTS * POOL_DIR_ENTRY)
        self._owners = [OWNER_FREE] * self.region_count

    def _load_header(self) -> None:
        magic, version, capacity, table_off, undo_off, dir_off, count = \
            _HDR.unpack(self.read(0, _HDR.size))
        if magic != MAGIC:
            raise CorruptHeaderError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise CorruptHeaderError(f"unsupported version {version}")
        if capacity != self.capacity or count != self.region_count:
            raise CorruptHeaderError("geometry mismatch")
        if (table_off, undo_off, dir_off) != (self._table_off, self._undo_off,
                                              self._dir_off):
            raise CorruptHeaderError("layout mismatch")

    def _recover(self) -> None:
        valid, = _U64.unpack(self.read(self._undo_off, 8))
        if valid:
            saved_off, saved_len = struct.unpack(
                "<QQ", self.read(self._undo_off + 8, 16))
            image = self.read(self._undo_off + 24, saved_len)
            self.write(saved_off, image)
            self.persist(saved_off, saved_len)
            self.write(self._undo_off, _U64.pack(0))
            self.persist(self._undo_off, 8)
        self._owners = [
            _ROW.unpack_from(self.read(self._table_off, self._table_len),
                             i * _ROW.size)[2]
            for i in range(self.region_count)
        ]
        # finish any interrupted pool deletion
        for entry in self.dir_entries(include_dead=True):
            if entry.state == POOL_DEAD:
                if entry.pool_id in set(self._owners):
                    self.region_free(entry.pool_id)
                self._dir_clear(entry.slot)

    def reclaim_orphans(self) -> int:
        """Free regions owned by pools that never reached the directory
        (a create interrupted before its commit point).  Called by the
        pool-managing layer, not by plain arena recovery, which must
        keep completed-but-unregistered allocations intact."""
        live_ids = {e.pool_id for e in self.dir_entries()}
        freed = 0
        for owner in set(self._owners):
            if owner != OWNER_FREE and owner not in live_ids:
                freed += self.region_free(owner)
        return freed

    # -- raw byte space --------------------------------------------------

    def read(self, offset: int, length: int) -> bytes:
        return self.backend.read(offset, length)

    def write(self, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > self.capacity:
            raise RangeError(f"write [{offset}, +{len(data)}) outside arena")
        self.backend.write(offset, data)

    def persist(self, offset: int, length: int) -> None:
        if offset < 0 or offset + length > self.capacity:
            raise RangeError(f"persist [{offset}, +{length}) outside arena")
        self.backend.persist(offset, length)

    def read_u64(self, offset: int) -> int:
        return _U64.unpack(self.read(offset, 8))[0]

    def write_u64(self, offset: int, value: int) -> None:
        self.write(offset, _U64.pack(value))

    def zero_fill(self, offset: int, length: int, chunk: int = 8 << 20) -> None:
        if offset < 0 or offset + length > self.capacity:
            raise RangeError(f"zero [{offset}, +{length}) outside arena")
        pos = offset
        end = offset + length
        while pos < end:
            n = min(chunk, end - pos)
            self.backend.zero(pos, n)
            pos += n

    # -- region allocation -------------------------------------------------

    def _row_off(self, index: int) -> int:
        return self._table_off + index * _ROW.size

    def _arm_undo(self) -> None:
        image = self.read(self._table_off, self._table_len)
        self.write(self._undo_off + 8, struct.pack(
            "<QQ", self._table_off, self._table_len))
        self.write(self._undo_off + 24, image)
        self.persist(self._undo_off + 8, 16 + self._table_len)
        self.write_u64(self._undo_off, 1)
        self.persist(self._undo_off, 8)

    def _disarm_undo(self) -> None:
        self.write_u64(self._undo_off, 0)
        self.persist(self._undo_off, 8)

    def region_alloc(self, pool_id: int, size_bytes: int) -> list[RegionDescriptor]:
        """Allocate ceil(size/32MiB) regions to `pool_id`, crash-atomically."""
        if size_bytes <= 0:
            raise RangeError("size_bytes must be > 0")
        if pool_id == OWNER_FREE:
            raise UnknownPoolError("pool_id 0 is reserved")
        want = -(-size_bytes // REGION_SIZE)
        free = [i for i, owner in enumerate(self._owners) if owner == OWNER_FREE]
        if len(free) < want:
            raise NoSpaceError(
                f"need {want} regions, {len(free)} free of {self.region_count}")
        chosen = free[:want]
        self._arm_undo()
        for i in chosen:
            self.write(self._row_off(i),
                       _ROW.pack((i + 1) * REGION_SIZE, REGION_SIZE, pool_id))
        self.persist(self._table_off, self._table_len)
        self._disarm_undo()
        for i in chosen:
            self._owners[i] = pool_id
        return [RegionDescriptor((i + 1) * REGION_SIZE, REGION_SIZE, pool_id)
                for i in chosen]

    def region_free(self, pool_id: int) -> int:
        """Zero-fill and release every region of `pool_id`; idempotent."""
        owned = [i for i, owner in enumerate(self._owners) if owner == pool_id]
        if not owned:
            raise UnknownPoolError(f"pool {pool_id} owns no regions")
        freed = 0
        for i in owned:
            self.zero_fill((i + 1) * REGION_SIZE, REGION_SIZE)
            self.write_u64(self._row_off(i) + 16, OWNER_FREE)
            self.persist(self._row_off(i) + 16, 8)
            self._owners[i] = OWNER_FREE
            freed += REGION_SIZE
        return freed

    def regions_of(self, pool_id: int) -> list[RegionDescriptor]:
        return [RegionDescriptor((i + 1) * REGION_SIZE, REGION_SIZE, owner)
                for i, owner in enumerate(self._owners) if owner == pool_id]

    def free_bytes(self) -> int:
        return sum(1 for o in self._owners if o == OWNER_FREE) * REGION_SIZE

    def owners(self) -> list[int]:
        return list(self._owners)

    # -- pool directory ----------------------------------------------------

    def _dir_slot_off(self, slot: int) -> int:
        return self._dir_off + slot * POOL_DIR_ENTRY

    def dir_entries(self, include_dead: bool = False) -> list[PoolDirEntry]:
        out = []
        for slot in range(POOL_DIR_SLOTS):
            raw = self.read(self._dir_slot_off(slot), POOL_DIR_ENTRY)
            state, pool_id, first_region, name_len = _DIR.unpack_from(raw)
            if state == POOL_LIVE or (include_dead and state == POOL_DEAD):
                out.append(PoolDirEntry(slot, state, pool_id, first_region,
                                        raw[32:32 + name_len]))
        return out

    def dir_lookup(self, name: bytes) -> Optional[PoolDirEntry]:
        for entry in self.dir_entries():
            if entry.name == name:
                return entry
        return None

    def next_pool_id(self) -> int:
        used = [e.pool_id for e in self.dir_entries(include_dead=True)]
        used += [o for o in self._owners if o != OWNER_FREE]
        return max(used, default=0) + 1

    def dir_create(self, name: bytes, pool_id: int, first_region: int) -> None:
        if len(name) > POOL_NAME_MAX:
            raise RangeError(f"pool name longer than {POOL_NAME_MAX} bytes")
        for slot in range(POOL_DIR_SLOTS):
            off = self._dir_slot_off(slot)
            state, = _U64.unpack(self.read(off, 8))
            if state == POOL_EMPTY:
                body = _DIR.pack(0, pool_id, first_region, len(name))
                self.write(off + 8, body[8:] + name.ljust(POOL_NAME_MAX, b"\0"))
                self.persist(off + 8, POOL_DIR_ENTRY - 8)
                self.write_u64(off, POOL_LIVE)
                self.persist(off, 8)
                return
        raise NoSpaceError("pool directory full")

    def dir_mark_dead(self, slot: int) -> None:
        self.write_u64(self._dir_slot_off(slot), POOL_DEAD)
        self.persist(self._dir_slot_off(slot), 8)

    def _dir_clear(self, slot: int) -> None:
        self.write(self._dir_slot_off(slot), bytes(POOL_DIR_ENTRY))
        self.persist(self._dir_slot_off(slot), POOL_DIR_ENTRY)

    def dir_remove(self, slot: int) -> None:
        self._dir_clear(slot)
