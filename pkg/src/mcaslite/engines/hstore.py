"""Persistent hopscotch hash table with two allocator variants.

hstore keeps the table in arena space and key/value payloads behind a
volatile allocator that is reconstituted on open; hstore-cc routes every
allocation and metadata mutation through the crash-consistent heap and
therefore recovers without a rebuild.

Entry layout, one cache line (64 bytes, little-endian)::

    0   hop info   u64   bit i: slot (bucket+i) holds an item homed here
                         (i < 63; bit 63 reserved)
    8   meta       u64   [version:48][flags:8][state:8]
    16  key field  24s   inline: len u8 + bytes; else offset u64, len u64
    40  val field  24s   same encoding

Only COMMITTED entries are visible.  Mutations persist payload bytes
first, then the entry body, then hop information, and flip the state
word (a single aligned 64-bit store) last, so a crash at any point
leaves either the old or the new pair, never a mixture.

Segments: segment 0 has `base_size` buckets, segment k >= 1 has
base_size * 2^(k-1), so each added segment doubles the table.  A hash
maps to a bucket by masking to the current capacity; the highest
surviving bit selects the segment and the rest the offset, which means
growth either leaves a key's bucket alone or moves it to the newest
segment.

Pool header page (4096 bytes at the pool's first region)::

    0   magic          u64  "MCPOOL01"
    8   pool id        u64
    16  engine kind    u64  1 = hstore, 2 = hstore-cc
    24  base size      u64
    32  segment count  u64
    40  first segment  u64  arena offset
    48  cleanup flag   u64  expansion redistribution in progress
"""

from __future__ import annotations

import struct
import time
from typing import Callable, Iterator, Optional

from ..errors import BadPoolError

from ..arena import PersistentArena
from ..ccheap import CcHeap
from ..errors import (
    AlreadyExistsError,
    CorruptHeaderError,
    KeyNotFoundError,
    NoSpaceError,
    RangeError,
)
from ..hashfn import hash64
from ..reconalloc import ReconAllocator
from .base import Pool, StoreBackend, check_value_size

POOL_MAGIC = 0x31304C4F4F50434D  # "MCPOOL01"
KIND_HSTORE = 1
KIND_CC = 2
HEADER_PAGE = 4096

ENTRY_SIZE = 64
SEG_HDR = 64
NEIGHBORHOOD = 63
HOP_MASK = (1 << 63) - 1
INLINE_MAX = 23
PROBE_WINDOW = 512
MAX_LOAD = 0.85

ST_FREE, ST_ALLOCATING, ST_COMMITTED, ST_DELETING = 0, 1, 2, 3
FL_INLINE_KEY = 1
FL_INLINE_VAL = 2

_ENTRY = struct.Struct("<QQ24s24s")
_ITEM = struct.Struct("<Q24s24s")  # entry minus the hop word
_U64 = struct.Struct("<Q")
_OFLINE = struct.Struct("<QQ8x")

_HDR = struct.Struct("<QQQQQQQ")


class _NeedExpansion(Exception):
    pass


def global_bucket(h: int, base_size: int, segment_count: int) -> int:
    """Map a 64-bit hash to a global bucket index."""
    return h & ((base_size << (segment_count - 1)) - 1)


def bucket_address(h: int, base_size: int, segment_count: int) -> tuple[int, int]:
    """(segment index, segment offset) for a hash; the highest unmasked
    bit names the segment, the remaining bits the offset."""
    g = global_bucket(h, base_size, segment_count)
    if g < base_size:
        return 0, g
    k = (g // base_size).bit_length()
    return k, g - (base_size << (k - 1))


def _meta(state: int, flags: int, version: int) -> int:
    return state | (flags << 8) | (version << 16)


def _meta_state(meta: int) -> int:
    return meta & 0xFF


def _meta_flags(meta: int) -> int:
    return (meta >> 8) & 0xFF


def _meta_version(meta: int) -> int:
    return meta >> 16


class HopscotchStore:
    """One pool's hopscotch table plus its payload allocator."""

    def __init__(self, arena: PersistentArena, pool_id: int,
                 regions: list[tuple[int, int]], kind: int,
                 hash_fn: Callable[[bytes], int] = hash64):
        self.arena = arena
        self.pool_id = pool_id
        self.regions = sorted(regions)
        self.kind = kind
        self.hash_fn = hash_fn
        self.hdr = self.regions[0][0]
        self.base_size = 0
        self.segs: list[tuple[int, int, int]] = []  # (bucket_count, gbase, off)
        self.capacity = 0
        self.nitems = 0
        self.heap: Optional[CcHeap] = None
        self.valloc: Optional[ReconAllocator] = None
        self.ado_heap: Optional[CcHeap] = None

    # -- lifecycle ---------------------------------------------------------

    def _payload_extents(self) -> list[tuple[int, int]]:
        first_off, first_len = self.regions[0]
        return ([(first_off + HEADER_PAGE, first_len - HEADER_PAGE)]
                + self.regions[1:])

    @classmethod
    def create(cls, arena: PersistentArena, pool_id: int,
               regions: list[tuple[int, int]], kind: int,
               base_size: int = 1024,
               hash_fn: Callable[[bytes], int] = hash64) -> "HopscotchStore":
        if base_size < 64 or base_size & (base_size - 1):
            raise RangeError("base_size must be a power of two >= 64")
        store = cls(arena, pool_id, regions, kind, hash_fn)
        store.base_size = base_size
        if kind == KIND_CC:
            store.heap = CcHeap.open(arena, store._payload_extents(), fresh=True)
            store.heap.extra_ranges = [(store.hdr, HEADER_PAGE)]
        else:
            store.valloc = ReconAllocator(store._payload_extents())
        seg_off = store._alloc(SEG_HDR + base_size * ENTRY_SIZE)
        store._format_segment(seg_off, base_size, 0)
        arena.write(store.hdr, _HDR.pack(POOL_MAGIC, pool_id, kind, base_size,
                                         1, seg_off, 0))
        arena.persist(store.hdr, _HDR.size)
        store.segs = [(base_size, 0, seg_off)]
        store.capacity = base_size
        return store

    @classmethod
    def open(cls, arena: PersistentArena, pool_id: int,
             regions: list[tuple[int, int]],
             hash_fn: Callable[[bytes], int] = hash64) -> "HopscotchStore":
        store = cls(arena, pool_id, regions, 0, hash_fn)
        magic, pid, kind, base_size, _, _, _ = _HDR.unpack(
            arena.read(store.hdr, _HDR.size))
        if magic != POOL_MAGIC:
            raise CorruptHeaderError("not a pool header")
        if pid != pool_id:
            raise CorruptHeaderError(f"pool id mismatch {pid} != {pool_id}")
        store.kind = kind
        store.base_size = base_size
        if kind == KIND_CC:
            # heap recovery may roll back an interrupted expansion, which
            # rewrites the segment count; walk the chain only afterwards
            store.heap = CcHeap.open(arena, store._payload_extents(), fresh=False)
            store.heap.extra_ranges = [(store.hdr, HEADER_PAGE)]
        seg_count, first_seg, cleanup = struct.unpack(
            "<QQQ", arena.read(store.hdr + 32, 24))
        off = first_seg
        for k in range(seg_count):
            count = base_size if k == 0 else base_size << (k - 1)
            gbase = 0 if k == 0 else base_size << (k - 1)
            store.segs.append((count, gbase, off))
            nxt, = _U64.unpack(arena.read(off + 8, 8))
            off = nxt
        store.capacity = base_size << (seg_count - 1)
        if kind == KIND_CC:
            if cleanup:
                store._sweep_invalid()
                store._set_cleanup(0)
            store.nitems = store._count_committed()
        else:
            store.valloc = store._rescan_rebuild()
        return store

    def _format_segment(self, off: int, count: int, index: int) -> None:
        image = bytearray(SEG_HDR + count * ENTRY_SIZE)
        struct.pack_into("<QQQ", image, 0, count, 0, index)
        self.arena.write(off, bytes(image))
        self.arena.persist(off, len(image))

    # -- allocator plumbing --------------------------------------------------

    def _alloc(self, size: int) -> int:
        if self.kind == KIND_CC:
            return self.heap.alloc(size)
        return self.valloc.alloc(size)

    def _free(self, off: int, size: int) -> None:
        if self.kind == KIND_CC:
            self.heap.free(off)
        else:
            self.valloc.free(off, size)

    def _txn_begin(self) -> None:
        if self.kind == KIND_CC:
            self.heap.log.begin()

    def _txn_record(self, off: int, length: int) -> None:
        if self.kind == KIND_CC:
            self.heap.log.record(off, length)

    def _txn_commit(self) -> None:
        if self.kind == KIND_CC:
            self.heap.commit()

    def _txn_abort(self) -> None:
        if self.kind == KIND_CC:
            self.heap.rollback()

    # -- bucket geometry -----------------------------------------------------

    def _global(self, h: int) -> int:
        return h & (self.capacity - 1)

    def _entry_off(self, g: int) -> int:
        base = self.base_size
        if g < base:
            return self.segs[0][2] + SEG_HDR + g * ENTRY_SIZE
        k = (g // base).bit_length()
        local = g - (base << (k - 1))
        return self.segs[k][2] + SEG_HDR + local * ENTRY_SIZE

    def _hop(self, g: int) -> int:
        return self.arena.read_u64(self._entry_off(g))

    def _meta_at(self, slot: int) -> int:
        return self.arena.read_u64(self._entry_off(slot) + 8)

    # -- field encoding --------------------------------------------------------

    def _encode_payload(self, data: bytes, force_out: bool) -> tuple[bytes, bool]:
        """Returns (24-byte field, inline?)."""
        if len(data) <= INLINE_MAX and not force_out:
            return bytes([len(data)]) + data.ljust(INLINE_MAX, b"\0"), True
        off = self._alloc(max(len(data), 1))
        self.arena.write(off, data if data else b"\0")
        self.arena.persist(off, max(len(data), 1))
        return _OFLINE.pack(off, len(data)), False

    def _field_bytes(self, field: bytes, inline: bool) -> bytes:
        if inline:
            return field[1:1 + field[0]]
        off, length = _OFLINE.unpack(field)
        return self.arena.read(off, length) if length else b""

    def _field_extent(self, field: bytes, inline: bool) -> Optional[tuple[int, int]]:
        if inline:
            return None
        off, length = _OFLINE.unpack(field)
        return off, max(length, 1)

    def _free_field(self, field: bytes, inline: bool) -> None:
        if not inline:
            off, length = _OFLINE.unpack(field)
            self._free(off, max(length, 1))

    # -- lookup ------------------------------------------------------------------

    def _find(self, key: bytes, h: int) -> Optional[tuple[int, int, bytes, bytes]]:
        g = self._global(h)
        bits = self._hop(g) & HOP_MASK
        while bits:
            i = (bits & -bits).bit_length() - 1
            bits &= bits - 1
            slot = g + i
            off = self._entry_off(slot)
            _hop, meta, kf, vf = _ENTRY.unpack(self.arena.read(off, ENTRY_SIZE))
            if _meta_state(meta) != ST_COMMITTED:
                continue
            if self._field_bytes(kf, _meta_flags(meta) & FL_INLINE_KEY) == key:
                return slot, meta, kf, vf
        return None

    def get(self, key: bytes) -> bytes:
        found = self._find(key, self.hash_fn(key))
        if found is None:
            raise KeyNotFoundError(key.hex())
        _slot, meta, _kf, vf = found
        return self._field_bytes(vf, _meta_flags(meta) & FL_INLINE_VAL)

    # -- insert machinery ----------------------------------------------------------

    def _free_slot_near(self, g: int) -> int:
        end = min(self.capacity, g + PROBE_WINDOW)
        for slot in range(g, end):
            if _meta_state(self._meta_at(slot)) == ST_FREE:
                return slot
        raise _NeedExpansion

    def _find_displacement(self, f: int) -> Optional[tuple[int, int]]:
        """A (home, slot) pair whose item may legally move to free slot f."""
        for b in range(max(0, f - NEIGHBORHOOD + 1), f):
            bits = self._hop(b) & HOP_MASK
            while bits:
                i = (bits & -bits).bit_length() - 1
                bits &= bits - 1
                s = b + i
                if s >= f:
                    break
                if _meta_state(self._meta_at(s)) == ST_COMMITTED:
                    return b, s
        return None

    def _displace(self, b: int, s: int, f: int) -> None:
        """Move the item at s (homed at b) into free slot f, crash-safely."""
        arena = self.arena
        s_off = self._entry_off(s)
        f_off = self._entry_off(f)
        b_off = self._entry_off(b)
        self._txn_begin()
        try:
            self._txn_record(f_off + 8, ENTRY_SIZE - 8)
            self._txn_record(b_off, 8)
            self._txn_record(s_off + 8, ENTRY_SIZE - 8)
            item = arena.read(s_off + 8, ENTRY_SIZE - 8)
            arena.write(f_off + 8, item)
            arena.persist(f_off + 8, ENTRY_SIZE - 8)
            hop = self._hop(b)
            hop = (hop | (1 << (f - b))) & ~(1 << (s - b))
            arena.write_u64(b_off, hop)
            arena.persist(b_off, 8)
            arena.write(s_off + 8, bytes(ENTRY_SIZE - 8))
            arena.persist(s_off + 8, ENTRY_SIZE - 8)
        except Exception:
            self._txn_abort()
            raise
        self._txn_commit()

    def _acquire_slot(self, g: int) -> int:
        """A FREE slot within the neighborhood of g, displacing as needed."""
        if self.nitems >= MAX_LOAD * self.capacity:
            raise _NeedExpansion
        f = self._free_slot_near(g)
        while f - g >= NEIGHBORHOOD:
            move = self._find_displacement(f)
            if move is None:
                raise _NeedExpansion
            b, s = move
            self._displace(b, s, f)
            f = s
        return f

    def put(self, key: bytes, value: bytes, no_overwrite: bool = False,
            force_out: bool = False) -> None:
        if not key:
            raise RangeError("key must be at least 1 byte")
        check_value_size(len(value))
        h = self.hash_fn(key)
        while True:
            found = self._find(key, h)
            if found is not None and no_overwrite:
                raise AlreadyExistsError(key.hex())
            try:
                if found is None:
                    self._insert(h, key, value, force_out)
                else:
                    self._overwrite(h, key, value, force_out)
                return
            except _NeedExpansion:
                self.expand()

    def _write_item(self, f: int, g: int, key_f: bytes, key_inline: bool,
                    val_f: bytes, val_inline: bool, version: int) -> None:
        """Persist a new item at f then link it into g's hop word."""
        arena = self.arena
        f_off = self._entry_off(f)
        g_off = self._entry_off(g)
        flags = ((FL_INLINE_KEY if key_inline else 0)
                 | (FL_INLINE_VAL if val_inline else 0))
        arena.write(f_off + 8, _ITEM.pack(
            _meta(ST_ALLOCATING, flags, version), key_f, val_f))
        arena.persist(f_off + 8, ENTRY_SIZE - 8)
        arena.write_u64(g_off, self._hop(g) | (1 << (f - g)))
        arena.persist(g_off, 8)
        arena.write_u64(f_off + 8, _meta(ST_COMMITTED, flags, version))
        arena.persist(f_off + 8, 8)

    def _insert(self, h: int, key: bytes, value: bytes, force_out: bool) -> None:
        g = self._global(h)
        f = self._acquire_slot(g)
        f_off = self._entry_off(f)
        g_off = self._entry_off(g)
        self._txn_begin()
        try:
            self._txn_record(f_off + 8, ENTRY_SIZE - 8)
            self._txn_record(g_off, 8)
            key_f, ki = self._encode_payload(key, False)
            val_f, vi = self._encode_payload(value, force_out)
            self._write_item(f, g, key_f, ki, val_f, vi, 1)
        except Exception:
            self._txn_abort()
            raise
        self._txn_commit()
        self.nitems += 1

    def _overwrite(self, h: int, key: bytes, value: bytes, force_out: bool) -> None:
        g = self._global(h)
        f = self._acquire_slot(g)
        found = self._find(key, h)
        if found is None:  # displaced state changed nothing; insert fresh
            self._insert(h, key, value, force_out)
            return
        s, old_meta, old_kf, old_vf = found
        arena = self.arena
        f_off = self._entry_off(f)
        g_off = self._entry_off(g)
        s_off = self._entry_off(s)
        version = _meta_version(old_meta) + 1
        self._txn_begin()
        try:
            self._txn_record(f_off + 8, ENTRY_SIZE - 8)
            self._txn_record(g_off, 8)
            self._txn_record(s_off + 8, ENTRY_SIZE - 8)
            key_f, ki = self._encode_payload(key, False)
            val_f, vi = self._encode_payload(value, force_out)
            flags = ((FL_INLINE_KEY if ki else 0) | (FL_INLINE_VAL if vi else 0))
            arena.write(f_off + 8, _ITEM.pack(
                _meta(ST_ALLOCATING, flags, version), key_f, val_f))
            arena.persist(f_off + 8, ENTRY_SIZE - 8)
            arena.write_u64(f_off + 8, _meta(ST_COMMITTED, flags, version))
            arena.persist(f_off + 8, 8)
            hop = self._hop(g)
            hop = (hop | (1 << (f - g))) & ~(1 << (s - g))
            arena.write_u64(g_off, hop)
            arena.persist(g_off, 8)
            arena.write(s_off + 8, bytes(ENTRY_SIZE - 8))
            arena.persist(s_off + 8, ENTRY_SIZE - 8)
            self._free_field(old_kf, _meta_flags(old_meta) & FL_INLINE_KEY)
            self._free_field(old_vf, _meta_flags(old_meta) & FL_INLINE_VAL)
        except Exception:
            self._txn_abort()
            raise
        self._txn_commit()

    def erase(self, key: bytes) -> None:
        h = self.hash_fn(key)
        found = self._find(key, h)
        if found is None:
            raise KeyNotFoundError(key.hex())
        s, meta, kf, vf = found
        g = self._global(h)
        arena = self.arena
        s_off = self._entry_off(s)
        g_off = self._entry_off(g)
        self._txn_begin()
        try:
            self._txn_record(s_off + 8, ENTRY_SIZE - 8)
            self._txn_record(g_off, 8)
            arena.write_u64(s_off + 8, _meta(ST_DELETING, _meta_flags(meta),
                                             _meta_version(meta)))
            arena.persist(s_off + 8, 8)
            arena.write_u64(g_off, self._hop(g) & ~(1 << (s - g)))
            arena.persist(g_off, 8)
            arena.write(s_off + 8, bytes(ENTRY_SIZE - 8))
            arena.persist(s_off + 8, ENTRY_SIZE - 8)
            self._free_field(kf, _meta_flags(meta) & FL_INLINE_KEY)
            self._free_field(vf, _meta_flags(meta) & FL_INLINE_VAL)
        except Exception:
            self._txn_abort()
            raise
        self._txn_commit()
        self.nitems -= 1

    # -- expansion -----------------------------------------------------------------

    def _set_cleanup(self, value: int) -> None:
        self.arena.write_u64(self.hdr + 48, value)
        self.arena.persist(self.hdr + 48, 8)

    def expand(self) -> None:
        """Append the next segment (doubling capacity) and redistribute."""
        s = len(self.segs)
        new_count = self.base_size << (s - 1)
        cap_old = self.capacity
        seg_bytes = SEG_HDR + new_count * ENTRY_SIZE
        arena = self.arena
        moved: list[tuple[int, int, bytes]] = []  # (slot, old home, item bytes)
        for key, slot, entry in self._walk_committed():
            h = self.hash_fn(key)
            if h & (2 * cap_old - 1) != h & (cap_old - 1):
                moved.append((slot, self._global(h), entry[8:]))
        image = bytearray(seg_bytes)
        struct.pack_into("<QQQ", image, 0, new_count, 0, s)
        occupied: set[int] = set()
        for slot, old_g, item in moved:
            local_home = old_g  # new home = old_g + cap_old; local = old_g
            local = None
            for cand in range(local_home,
                              min(new_count, local_home + NEIGHBORHOOD)):
                if cand not in occupied:
                    local = cand
                    break
            if local is None:
                raise NoSpaceError("cannot place item during expansion")
            occupied.add(local)
            pos = SEG_HDR + local * ENTRY_SIZE
            image[pos + 8:pos + ENTRY_SIZE] = item
            hpos = SEG_HDR + local_home * ENTRY_SIZE
            hop, = _U64.unpack_from(image, hpos)
            struct.pack_into("<Q", image, hpos, hop | (1 << (local - local_home)))
        tail_off = self.segs[-1][2]
        self._txn_begin()
        try:
            seg_off = self._alloc(seg_bytes)
            arena.write(seg_off, bytes(image))
            arena.persist(seg_off, seg_bytes)
            self._txn_record(tail_off + 8, 8)
            arena.write_u64(tail_off + 8, seg_off)
            arena.persist(tail_off + 8, 8)
            self._txn_record(self.hdr + 48, 8)
            arena.write_u64(self.hdr + 48, 1)
            arena.persist(self.hdr + 48, 8)
            self._txn_record(self.hdr + 32, 8)
            arena.write_u64(self.hdr + 32, s + 1)
            arena.persist(self.hdr + 32, 8)
        except Exception:
            self._txn_abort()
            raise
        self._txn_commit()
        self.segs.append((new_count, cap_old, seg_off))
        self.capacity = 2 * cap_old
        for slot, old_g, _item in moved:
            s_off = self._entry_off(slot)
            g_off = self._entry_off(old_g)
            self._txn_begin()
            try:
                self._txn_record(s_off + 8, ENTRY_SIZE - 8)
                self._txn_record(g_off, 8)
                arena.write_u64(g_off, self._hop(old_g) & ~(1 << (slot - old_g)))
                arena.persist(g_off, 8)
                arena.write(s_off + 8, bytes(ENTRY_SIZE - 8))
                arena.persist(s_off + 8, ENTRY_SIZE - 8)
            except Exception:
                self._txn_abort()
                raise
            self._txn_commit()
        self._set_cleanup(0)

    # -- scans, recovery, audit ---------------------------------------------------

    def _walk_committed(self) -> Iterator[tuple[bytes, int, bytes]]:
        """Yields (key, global slot, raw entry) for every COMMITTED entry."""
        for count, gbase, off in list(self.segs):
            raw = self.arena.read(off + SEG_HDR, count * ENTRY_SIZE)
            for i in range(count):
                entry = raw[i * ENTRY_SIZE:(i + 1) * ENTRY_SIZE]
                meta, = _U64.unpack_from(entry, 8)
                if _meta_state(meta) != ST_COMMITTED:
                    continue
                key = self._field_bytes(entry[16:40],
                                        _meta_flags(meta) & FL_INLINE_KEY)
                yield key, gbase + i, entry

    def _count_committed(self) -> int:
        n = 0
        for count, _gbase, off in self.segs:
            raw = self.arena.read(off + SEG_HDR, count * ENTRY_SIZE)
            for i in range(count):
                meta, = _U64.unpack_from(raw, i * ENTRY_SIZE + 8)
                if _meta_state(meta) == ST_COMMITTED:
                    n += 1
        return n

    def _choose_survivors(self) -> tuple[dict[bytes, tuple], list[int]]:
        """Dedupe committed entries; returns (key -> (slot, entry)), clears.

        Preference: valid hop distance first, then higher version, then
        the lower slot.  Non-committed entries always clear.
        """
        best: dict[bytes, tuple[int, int, bool, bytes]] = {}
        clears: list[int] = []
        for count, gbase, off in self.segs:
            raw = self.arena.read(off + SEG_HDR, count * ENTRY_SIZE)
            for i in range(count):
                entry = raw[i * ENTRY_SIZE:(i + 1) * ENTRY_SIZE]
                meta, = _U64.unpack_from(entry, 8)
                state = _meta_state(meta)
                if state == ST_FREE:
                    continue
                slot = gbase + i
                if state != ST_COMMITTED:
                    clears.append(slot)
                    continue
                key = self._field_bytes(entry[16:40],
                                        _meta_flags(meta) & FL_INLINE_KEY)
                g = self._global(self.hash_fn(key))
                valid = 0 <= slot - g < NEIGHBORHOOD
                version = _meta_version(meta)
                prev = best.get(key)
                if prev is None:
                    best[key] = (slot, version, valid, entry)
                    continue
                p_slot, p_version, p_valid, _ = prev
                better = ((valid, version, -slot) > (p_valid, p_version, -p_slot))
                if better:
                    clears.append(p_slot)
                    best[key] = (slot, version, valid, entry)
                else:
                    clears.append(slot)
        return best, clears

    def _apply_survivors(self, best: dict, clears: list[int]) -> None:
        """Clear losers and rebuild every hop word from the survivors."""
        arena = self.arena
        hops: dict[int, int] = {}
        for key, (slot, _v, _valid, _entry) in best.items():
            g = self._global(self.hash_fn(key))
            hops[g] = hops.get(g, 0) | (1 << (slot - g))
        for count, gbase, off in self.segs:
            raw = bytearray(arena.read(off + SEG_HDR, count * ENTRY_SIZE))
            dirty = False
            for i in range(count):
                g = gbase + i
                pos = i * ENTRY_SIZE
                want = hops.get(g, 0)
                have, = _U64.unpack_from(raw, pos)
                if have != want:
                    struct.pack_into("<Q", raw, pos, want)
                    dirty = True
            for slot in clears:
                if gbase <= slot < gbase + count:
                    pos = (slot - gbase) * ENTRY_SIZE
                    raw[pos + 8:pos + ENTRY_SIZE] = bytes(ENTRY_SIZE - 8)
                    dirty = True
            if dirty:
                arena.write(off + SEG_HDR, bytes(raw))
                arena.persist(off + SEG_HDR, count * ENTRY_SIZE)

    def _rescan_rebuild(self) -> ReconAllocator:
        """hstore open: dedupe, rebuild hop words, reconstitute allocator."""
        best, clears = self._choose_survivors()
        self._apply_survivors(best, clears)
        live: list[tuple[int, int]] = []
        for count, _gbase, off in self.segs:
            live.append((off, SEG_HDR + count * ENTRY_SIZE))
        ado_off, ado_len = struct.unpack("<QQ", self.arena.read(self.hdr + 56,
                                                                16))
        if ado_off:
            live.append((ado_off, ado_len))
        for _key, (_slot, _v, _valid, entry) in best.items():
            meta, = _U64.unpack_from(entry, 8)
            flags = _meta_flags(meta)
            for field, fl in ((entry[16:40], FL_INLINE_KEY),
                              (entry[40:64], FL_INLINE_VAL)):
                ext = self._field_extent(field, flags & fl)
                if ext is not None:
                    live.append(ext)
        self.nitems = len(best)
        self._set_cleanup(0)
        return ReconAllocator.reconstitute(self._payload_extents(), live)

    def _sweep_invalid(self) -> None:
        """Bounded post-expansion sweep for hstore-cc: drop entries left at
        stale positions by an interrupted redistribution (payloads are
        shared with their moved copies, so nothing is freed here)."""
        best, clears = self._choose_survivors()
        self._apply_survivors(best, clears)

    # -- audit / iteration ------------------------------------------------------

    def audit(self) -> dict[bytes, bytes]:
        """Check hopscotch invariants; returns the committed contents."""
        entries: dict[int, tuple[int, bytes]] = {}
        hops: dict[int, int] = {}
        for count, gbase, off in self.segs:
            raw = self.arena.read(off + SEG_HDR, count * ENTRY_SIZE)
            for i in range(count):
                pos = i * ENTRY_SIZE
                hop, meta = struct.unpack_from("<QQ", raw, pos)
                if hop >> 63:
                    raise AssertionError(f"reserved hop bit set at {gbase + i}")
                if hop & HOP_MASK:
                    hops[gbase + i] = hop & HOP_MASK
                state = _meta_state(meta)
                if state not in (ST_FREE, ST_COMMITTED):
                    raise AssertionError(f"transient state {state} at rest")
                if state == ST_COMMITTED:
                    entries[gbase + i] = (meta, raw[pos:pos + ENTRY_SIZE])
        contents: dict[bytes, bytes] = {}
        homes: dict[int, int] = {}
        for slot, (meta, entry) in entries.items():
            flags = _meta_flags(meta)
            key = self._field_bytes(entry[16:40], flags & FL_INLINE_KEY)
            g = self._global(self.hash_fn(key))
            if not 0 <= slot - g < NEIGHBORHOOD:
                raise AssertionError(f"slot {slot} outside neighborhood of {g}")
            if not hops.get(g, 0) & (1 << (slot - g)):
                raise AssertionError(f"hop bit missing for slot {slot}")
            if key in contents:
                raise AssertionError(f"duplicate key {key!r}")
            homes[slot] = g
            contents[key] = self._field_bytes(entry[40:64], flags & FL_INLINE_VAL)
        for g, bits in hops.items():
            while bits:
                i = (bits & -bits).bit_length() - 1
                bits &= bits - 1
                slot = g + i
                if slot not in entries:
                    raise AssertionError(f"hop bit {g}+{i} -> empty slot")
                if homes[slot] != g:
                    raise AssertionError(f"hop bit {g}+{i} -> foreign item")
        if len(contents) != self.nitems:
            raise AssertionError(
                f"item count {self.nitems} != {len(contents)}")
        return contents

    def items(self) -> Iterator[tuple[bytes, bytes]]:
        for key, _slot, entry in self._walk_committed():
            meta, = _U64.unpack_from(entry, 8)
            yield key, self._field_bytes(entry[40:64],
                                         _meta_flags(meta) & FL_INLINE_VAL)

    # -- value descriptors (plugin access) ----------------------------------------

    def value_extent(self, key: bytes) -> tuple[int, int]:
        """(arena offset, length) of an out-of-line value."""
        found = self._find(key, self.hash_fn(key))
        if found is None:
            raise KeyNotFoundError(key.hex())
        _slot, meta, _kf, vf = found
        if _meta_flags(meta) & FL_INLINE_VAL:
            raise RangeError("value is inline; migrate first")
        off, length = _OFLINE.unpack(vf)
        return off, length

    def ensure_outofline(self, key: bytes, min_size: int = 0,
                         create: bool = False) -> tuple[int, int, bool]:
        found = self._find(key, self.hash_fn(key))
        if found is None:
            if not create:
                raise KeyNotFoundError(key.hex())
            if min_size < 1:
                raise RangeError("creation size must be >= 1")
            self.put(key, bytes(min_size), force_out=True)
            off, length = self.value_extent(key)
            return off, length, True
        _slot, meta, _kf, vf = found
        if _meta_flags(meta) & FL_INLINE_VAL:
            data = self._field_bytes(vf, True)
            self.put(key, data, force_out=True)
            off, length = self.value_extent(key)
            return off, length, False
        off, length = _OFLINE.unpack(vf)
        return off, length, False

    def free_space(self) -> int:
        if self.kind == KIND_CC:
            return self.heap.free_bytes()
        return self.valloc.free_bytes()

    # -- plugin allocations ----------------------------------------------------

    # Plugin-held memory (detached values, allocate_memory) must survive
    # restart even though nothing in the hash table references it, so it
    # always comes from a crash-consistent heap: hstore-cc uses its main
    # heap, hstore carves a dedicated cc sub-heap out of the pool space
    # and pins it via header fields (offsets 56/64) so reconstitution
    # marks it live.

    def ado_alloc(self, size: int, heap_size: int = 8 << 20) -> int:
        if self.kind == KIND_CC:
            return self.heap.alloc(size)
        self._ensure_ado_heap(heap_size)
        return self.ado_heap.alloc(size)

    def ado_free(self, offset: int) -> None:
        if self.kind == KIND_CC:
            self.heap.free(offset)
            return
        if self.ado_heap is None:
            self._ensure_ado_heap(0)
        self.ado_heap.free(offset)

    def _ensure_ado_heap(self, heap_size: int) -> None:
        if self.ado_heap is not None:
            return
        off, length = struct.unpack("<QQ", self.arena.read(self.hdr + 56, 16))
        if off:
            self.ado_heap = CcHeap.open(self.arena, [(off, length)],
                                        fresh=False)
            return
        if heap_size <= 0:
            raise RangeError("pool has no plugin heap yet")
        off = self.valloc.alloc(heap_size)
        heap = CcHeap.open(self.arena, [(off, heap_size)], fresh=True)
        self.arena.write(self.hdr + 64, _U64.pack(heap_size))
        self.arena.persist(self.hdr + 64, 8)
        self.arena.write(self.hdr + 56, _U64.pack(off))
        self.arena.persist(self.hdr + 56, 8)
        self.ado_heap = heap


class HstorePool(Pool):
    """Pool facade over one HopscotchStore."""

    def __init__(self, store: HopscotchStore, name: bytes,
                 size: int):
        self.store = store
        self.name = name
        self.pool_id = store.pool_id
        self.size = size
        self.ado_heap_size = 8 << 20
        self._write_ns: dict[bytes, int] = {}

    def put(self, key: bytes, value: bytes, no_overwrite: bool = False) -> None:
        self.store.put(key, value, no_overwrite=no_overwrite)
        self._write_ns[key] = time.time_ns()

    def get(self, key: bytes) -> bytes:
        return self.store.get(key)

    def erase(self, key: bytes) -> None:
        self.store.erase(key)
        self._write_ns.pop(key, None)

    def resize_value(self, key: bytes, new_size: int) -> None:
        check_value_size(new_size)
        old = self.store.get(key)
        if len(old) >= new_size:
            data = old[:new_size]
        else:
            data = old + bytes(new_size - len(old))
        self.store.put(key, data)
        self._write_ns[key] = time.time_ns()

    def count(self) -> int:
        return self.store.nitems

    def keys(self) -> Iterator[bytes]:
        for key, _value in self.store.items():
            yield key

    def items(self) -> Iterator[tuple[bytes, bytes]]:
        return self.store.items()

    def attributes(self, key: Optional[bytes] = None) -> dict:
        if key is None:
            return {"count": self.store.nitems, "size": self.size,
                    "free_bytes": self.store.free_space()}
        found = self.store._find(key, self.store.hash_fn(key))
        if found is None:
            raise KeyNotFoundError(key.hex())
        _slot, meta, _kf, vf = found
        value = self.store._field_bytes(vf, _meta_flags(meta) & FL_INLINE_VAL)
        return {"value_len": len(value),
                "write_epoch_ns": self._write_ns.get(key, 0)}

    def value_descriptor(self, key: bytes, min_size: int = 0,
                         create: bool = False) -> tuple[int, int, bool]:
        return self.store.ensure_outofline(key, min_size, create)

    def ado_alloc(self, size: int) -> int:
        return self.store.ado_alloc(size, self.ado_heap_size)

    def ado_free(self, offset: int) -> None:
        self.store.ado_free(offset)

    def put_forced(self, key: bytes, value: bytes) -> None:
        """Put keeping the value out-of-line (plugin-addressable)."""
        self.store.put(key, value, force_out=True)
        self._write_ns[key] = time.time_ns()

    def _value_range(self, key: bytes) -> tuple[int, int, int, bytes]:
        found = self.store._find(key, self.store.hash_fn(key))
        if found is None:
            raise KeyNotFoundError(key.hex())
        _slot, meta, _kf, vf = found
        if _meta_flags(meta) & FL_INLINE_VAL:
            return -1, vf[0], meta, vf
        off, length = _OFLINE.unpack(vf)
        return off, length, meta, vf

    def read_value_slice(self, key: bytes, offset: int, length: int) -> bytes:
        voff, vlen, meta, vf = self._value_range(key)
        if offset < 0 or offset + length > vlen:
            raise RangeError(f"slice [{offset}, +{length}) beyond value {vlen}")
        if voff < 0:
            return self.store._field_bytes(vf, True)[offset:offset + length]
        return self.store.arena.read(voff + offset, length)

    def write_value_slice(self, key: bytes, offset: int, data: bytes) -> None:
        voff, vlen, meta, vf = self._value_range(key)
        if offset < 0 or offset + len(data) > vlen:
            raise RangeError(f"slice [{offset}, +{len(data)}) beyond value {vlen}")
        if voff < 0:
            whole = bytearray(self.store._field_bytes(vf, True))
            whole[offset:offset + len(data)] = data
            self.store.put(key, bytes(whole))
        else:
            self.store.arena.write(voff + offset, data)
            self.store.arena.persist(voff + offset, len(data))
        self._write_ns[key] = time.time_ns()


class HstoreBackend(StoreBackend):
    """Arena-backed engine managing pools through the region allocator."""

    def __init__(self, arena: PersistentArena, kind: str = "hstore",
                 base_size: int = 1024,
                 hash_fn: Callable[[bytes], int] = hash64):
        self.arena = arena
        self.kind = kind
        self.engine_kind = KIND_CC if kind == "hstore-cc" else KIND_HSTORE
        self.base_size = base_size
        self.hash_fn = hash_fn
        self._pools: dict[bytes, HstorePool] = {}

    def create_pool(self, name: bytes, size: int) -> HstorePool:
        existing = self.open_pool(name)
        if existing is not None:
            return existing
        pool_id = self.arena.next_pool_id()
        descs = self.arena.region_alloc(pool_id, size)
        store = HopscotchStore.create(
            self.arena, pool_id, [(d.offset, d.length) for d in descs],
            self.engine_kind, self.base_size, self.hash_fn)
        self.arena.dir_create(name, pool_id, descs[0].offset)
        pool = HstorePool(store, name, sum(d.length for d in descs))
        self._pools[name] = pool
        return pool

    def open_pool(self, name: bytes) -> Optional[HstorePool]:
        if name in self._pools:
            return self._pools[name]
        entry = self.arena.dir_lookup(name)
        if entry is None:
            return None
        descs = self.arena.regions_of(entry.pool_id)
        store = HopscotchStore.open(
            self.arena, entry.pool_id, [(d.offset, d.length) for d in descs],
            self.hash_fn)
        pool = HstorePool(store, name, sum(d.length for d in descs))
        self._pools[name] = pool
        return pool

    def delete_pool(self, name: bytes) -> None:
        entry = self.arena.dir_lookup(name)
        if entry is None:
            raise BadPoolError(f"no pool named {name!r}")
        self._pools.pop(name, None)
        self.arena.dir_mark_dead(entry.slot)
        self.arena.region_free(entry.pool_id)
        self.arena.dir_remove(entry.slot)

    def pool_info(self, pool: HstorePool) -> dict:
        return pool.attributes()

    def close(self) -> None:
        self._pools.clear()
        self.arena.close()
