"""Volatile payload allocator that is rebuilt from durable length records.

Objects up to 4 KiB come from per-class slab regions: each class is a
power of two in [8, 4096] and owns 1 MiB regions carved 1 MiB-aligned out
of the large allocator, with one occupancy bit per slot.  Larger objects
(and the slab regions themselves) come from a best-fit extent allocator
over the pool's byte space, rounded to 64-byte lines.

Nothing here persists.  After a restart the allocator is reconstituted
from the (offset, length) pairs of every live object: small objects imply
their containing slab region and slot, large objects carve their rounded
extent directly.  The rebuilt state admits exactly the same free capacity
as an allocator that never restarted.
"""

from __future__ import annotations

import bisect

from .errors import BadFreeError, NoSpaceError, OverlapError, RangeError

SMALL_MAX = 4096
SLAB_REGION = 1 << 20
MIN_CLASS = 8
LINE = 64


def size_class(size: int) -> int:
    if size <= MIN_CLASS:
        return MIN_CLASS
    return 1 << (size - 1).bit_length()


def _round_line(size: int) -> int:
    return (size + LINE - 1) & ~(LINE - 1)


class ExtentAllocator:
    """Best-fit (size, then address) free-extent allocator with coalescing."""

    def __init__(self, extents: list[tuple[int, int]]):
        self._by_start: dict[int, int] = {}
        self._by_end: dict[int, int] = {}
        self._sizes: list[tuple[int, int]] = []  # (length, start), sorted
        self._starts: list[int] = []
        for off, length in extents:
            self._insert(off, length)

    def _insert(self, off: int, length: int) -> None:
        self._by_start[off] = length
        self._by_end[off + length] = off
        bisect.insort(self._sizes, (length, off))
        bisect.insort(self._starts, off)

    def _remove(self, off: int) -> int:
        length = self._by_start.pop(off)
        del self._by_end[off + length]
        self._sizes.remove((length, off))
        self._starts.remove(off)
        return length

    def alloc(self, size: int, align: int = LINE) -> int:
        i = bisect.bisect_left(self._sizes, (size, -1))
        while i < len(self._sizes):
            length, off = self._sizes[i]
            start = (off + align - 1) & ~(align - 1)
            if start + size <= off + length:
                self._remove(off)
                if start > off:
                    self._insert(off, start - off)
                tail = (off + length) - (start + size)
                if tail:
                    self._insert(start + size, tail)
                return start
            i += 1
        raise NoSpaceError(f"no free extent for {size} bytes (align {align})")

    def carve(self, off: int, size: int) -> None:
        """Claim an exact range; fails unless it is entirely free."""
        i = bisect.bisect_right(self._starts, off) - 1
        if i < 0:
            raise OverlapError(f"range [{off}, +{size}) not free")
        start = self._starts[i]
        length = self._by_start[start]
        if off + size > start + length:
            raise OverlapError(f"range [{off}, +{size}) not free")
        self._remove(start)
        if off > start:
            self._insert(start, off - start)
        tail = (start + length) - (off + size)
        if tail:
            self._insert(off + size, tail)

    def free(self, off: int, size: int) -> None:
        prev = self._by_end.get(off)
        if prev is not None:
            off, size = prev, size + self._remove(prev)
        if off + size in self._by_start:
            size += self._remove(off + size)
        self._insert(off, size)

    def free_bytes(self) -> int:
        return sum(self._by_start.values())

    def extents(self) -> list[tuple[int, int]]:
        return sorted(self._by_start.items())


class _Slab:
    __slots__ = ("base", "bitmap", "free_count")

    def __init__(self, base: int, slots: int):
        self.base = base
        self.bitmap = 0
        self.free_count = slots


class _Bucket:
    __slots__ = ("class_size", "slots", "full_mask", "regions", "order", "cursor")

    def __init__(self, class_size: int):
        self.class_size = class_size
        self.slots = SLAB_REGION // class_size
        self.full_mask = (1 << self.slots) - 1
        self.regions: dict[int, _Slab] = {}
        self.order: list[int] = []
        self.cursor = 0


class ReconAllocator:
    """Pool payload allocator; `reconstitute` rebuilds it after restart."""

    def __init__(self, extents: list[tuple[int, int]]):
        if not extents:
            raise RangeError("allocator needs at least one extent")
        self.extents = sorted(extents)
        self.large = ExtentAllocator(self.extents)
        self.buckets = {1 << n: _Bucket(1 << n) for n in range(3, 13)}
        self.live_large: dict[int, int] = {}

    # -- allocation --------------------------------------------------------

    def alloc(self, size: int) -> int:
        if size <= 0:
            raise RangeError("alloc size must be > 0")
        if size > SMALL_MAX:
            rounded = _round_line(size)
            off = self.large.alloc(rounded)
            self.live_large[off] = rounded
            return off
        bucket = self.buckets[size_class(size)]
        order = bucket.order
        for step in range(len(order)):
            idx = (bucket.cursor + step) % len(order)
            slab = bucket.regions[order[idx]]
            if slab.free_count:
                bucket.cursor = idx
                return self._take_slot(bucket, slab)
        base = self.large.alloc(SLAB_REGION, align=SLAB_REGION)
        slab = _Slab(base, bucket.slots)
        bucket.regions[base] = slab
        bucket.order.append(base)
        bucket.cursor = len(bucket.order) - 1
        return self._take_slot(bucket, slab)

    def _take_slot(self, bucket: _Bucket, slab: _Slab) -> int:
        inv = ~slab.bitmap & bucket.full_mask
        bit = (inv & -inv).bit_length() - 1
        slab.bitmap |= 1 << bit
        slab.free_count -= 1
        return slab.base + bit * bucket.class_size

    def free(self, offset: int, size: int) -> None:
        if size > SMALL_MAX:
            rounded = self.live_large.pop(offset, None)
            if rounded is None or rounded != _round_line(size):
                if rounded is not None:
                    self.live_large[offset] = rounded
                raise BadFreeError(f"no live large object at {offset}")
            self.large.free(offset, rounded)
            return
        bucket = self.buckets[size_class(size)]
        base = offset - offset % SLAB_REGION
        slab = bucket.regions.get(base)
        rel = offset - base
        if slab is None or rel % bucket.class_size:
            raise BadFreeError(f"no slab slot at {offset}")
        bit = rel // bucket.class_size
        if not slab.bitmap & (1 << bit):
            raise BadFreeError(f"slot at {offset} already free")
        slab.bitmap &= ~(1 << bit)
        slab.free_count += 1
        if slab.free_count == bucket.slots:
            del bucket.regions[base]
            idx = bucket.order.index(base)
            bucket.order.pop(idx)
            if bucket.cursor >= idx and bucket.cursor:
                bucket.cursor -= 1
            self.large.free(base, SLAB_REGION)

    # -- reconstitution -----------------------------------------------------

    @classmethod
    def reconstitute(cls, extents: list[tuple[int, int]],
                     live: list[tuple[int, int]]) -> "ReconAllocator":
        alloc = cls(extents)
        records = sorted(live)
        for (a_off, a_len), (b_off, _) in zip(records, records[1:]):
            if a_off + a_len > b_off:
                raise OverlapError(f"live records overlap at {b_off}")
        smalls: list[tuple[int, int]] = []
        for off, length in records:
            if length <= 0:
                raise OverlapError(f"empty live record at {off}")
            if length > SMALL_MAX:
                rounded = _round_line(length)
                alloc.large.carve(off, rounded)
                alloc.live_large[off] = rounded
            else:
                smalls.append((off, length))
        carved: dict[int, int] = {}  # slab base -> class
        for off, length in smalls:
            cls_size = size_class(length)
            base = off - off % SLAB_REGION
            known = carved.get(base)
            if known is None:
                alloc.large.carve(base, SLAB_REGION)
                carved[base] = cls_size
            elif known != cls_size:
                raise OverlapError(f"mixed size classes in slab at {base}")
            bucket = alloc.buckets[cls_size]
            slab = bucket.regions.get(base)
            if slab is None:
                slab = _Slab(base, bucket.slots)
                bucket.regions[base] = slab
                bisect.insort(bucket.order, base)
            rel = off - base
            if rel % cls_size:
                raise OverlapError(f"misaligned slot at {off}")
            bit = rel // cls_size
            if slab.bitmap & (1 << bit):
                raise OverlapError(f"duplicate slot at {off}")
            slab.bitmap |= 1 << bit
            slab.free_count -= 1
        return alloc

    # -- accounting -----------------------------------------------------------

    def stats(self) -> dict:
        small_live = sum(
            bucket.slots - slab.free_count
            for bucket in self.buckets.values()
            for slab in bucket.regions.values()
        )
        return {
            "free_extent_bytes": self.large.free_bytes(),
            "slab_regions": sum(len(b.regions) for b in self.buckets.values()),
            "live_large": len(self.live_large),
            "live_small": small_live,
        }

    def free_bytes(self) -> int:
        slack = sum(
            slab.free_count * bucket.class_size
            for bucket in self.buckets.values()
            for slab in bucket.regions.values()
        )
        return self.large.free_bytes() + slack
