"""User-level IPC: lock-free SPSC rings in shared memory.

One segment holds two rings (one per direction) plus a spill area per
direction for payloads larger than a slot.  Each ring has exactly one
producer and one consumer; progress needs no syscall, just aligned
64-bit counter stores (x86 total store order plus the interpreter's
sequential bytecode execution give the required publication order:
slot bytes are fully written before the head counter moves).

Segment layout::

    ring A (shard -> host)   head u64, tail u64, 48 pad, 64 x 4096 slots
    ring B (host -> shard)   same
    scratch A                8 MiB spill space for ring A payloads
    scratch B                8 MiB

Slot: used u32, kind u32, spill u32, pad u32, data[4080].  A spilled
payload stores (offset u64, length u64) pointing into the direction's
scratch; spill space is bump-allocated with wraparound, which is safe
because each direction carries at most two oversized messages in flight
(one work, one callback) and the scratch holds far more.

Segments are named `mcaslite.<shard>.<pool>.uipc`.
"""

from __future__ import annotations

import struct
import time
from multiprocessing import resource_tracker, shared_memory
from typing import Optional

SLOTS = 64
SLOT_SIZE = 4096
SLOT_HDR = 16
SLOT_DATA = SLOT_SIZE - SLOT_HDR
RING_HDR = 64
RING_BYTES = RING_HDR + SLOTS * SLOT_SIZE
SCRATCH = 8 << 20
SEGMENT_BYTES = 2 * RING_BYTES + 2 * SCRATCH

_U64 = struct.Struct("<Q")
_SLOT = struct.Struct("<III4x")
_SPILL = struct.Struct("<QQ")


class QueueFull(Exception):
    pass


class _Ring:
    """One direction; producer and consumer each call only their half."""

    def __init__(self, buf, base: int, scratch_base: int):
        self.buf = buf
        self.base = base
        self.scratch_base = scratch_base
        self.scratch_cursor = 0

    def _head(self) -> int:
        return _U64.unpack_from(self.buf, self.base)[0]

    def _tail(self) -> int:
        return _U64.unpack_from(self.buf, self.base + 8)[0]

    def try_push(self, kind: int, payload: bytes) -> bool:
        head = self._head()
        if head - self._tail() >= SLOTS:
            return False
        slot = self.base + RING_HDR + (head % SLOTS) * SLOT_SIZE
        if len(payload) <= SLOT_DATA:
            _SLOT.pack_into(self.buf, slot, len(payload), kind, 0)
            self.buf[slot + SLOT_HDR:slot + SLOT_HDR + len(payload)] = payload
        else:
            if len(payload) > SCRATCH:
                raise QueueFull(f"payload of {len(payload)} exceeds scratch")
            if self.scratch_cursor + len(payload) > SCRATCH:
                self.scratch_cursor = 0
            off = self.scratch_cursor
            self.scratch_cursor += len(payload)
            self.buf[self.scratch_base + off:
                     self.scratch_base + off + len(payload)] = payload
            _SLOT.pack_into(self.buf, slot, _SPILL.size, kind, 1)
            _SPILL.pack_into(self.buf, slot + SLOT_HDR, off, len(payload))
        _U64.pack_into(self.buf, self.base, head + 1)
        return True

    def try_pop(self) -> Optional[tuple[int, bytes]]:
        tail = self._tail()
        if self._head() <= tail:
            return None
        slot = self.base + RING_HDR + (tail % SLOTS) * SLOT_SIZE
        length, kind, spill = _SLOT.unpack_from(self.buf, slot)
        data = bytes(self.buf[slot + SLOT_HDR:slot + SLOT_HDR + length])
        if spill:
            off, real_len = _SPILL.unpack(data)
            data = bytes(self.buf[self.scratch_base + off:
                                  self.scratch_base + off + real_len])
        _U64.pack_into(self.buf, self.base + 8, tail + 1)
        return kind, data


class QueuePair:
    """One endpoint's send/recv view over a segment."""

    def __init__(self, buf, a_is_send: bool, shm=None, owner: bool = False):
        ring_a = _Ring(buf, 0, 2 * RING_BYTES)
        ring_b = _Ring(buf, RING_BYTES, 2 * RING_BYTES + SCRATCH)
        self.send_ring = ring_a if a_is_send else ring_b
        self.recv_ring = ring_b if a_is_send else ring_a
        self._shm = shm
        self._owner = owner

    def send(self, kind: int, payload: bytes, timeout: float = 5.0) -> None:
        deadline = time.monotonic() + timeout
        while not self.send_ring.try_push(kind, payload):
            if time.monotonic() > deadline:
                raise QueueFull("peer not draining the ring")
            time.sleep(0.0002)

    def try_send(self, kind: int, payload: bytes) -> bool:
        return self.send_ring.try_push(kind, payload)

    def try_recv(self) -> Optional[tuple[int, bytes]]:
        return self.recv_ring.try_pop()

    def recv(self, timeout: Optional[float] = None) -> Optional[tuple[int, bytes]]:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            got = self.recv_ring.try_pop()
            if got is not None:
                return got
            if deadline is not None and time.monotonic() > deadline:
                return None
            time.sleep(0.0002)

    def close(self) -> None:
        if self._shm is not None:
            self._shm.close()
            if self._owner:
                try:
                    self._shm.unlink()
                except FileNotFoundError:
                    pass
            self._shm = None


def segment_name(shard: int, pool: int) -> str:
    return f"mcaslite.{shard}.{pool}.uipc"


def create_shared(name: str) -> QueuePair:
    """Shard side; creates and owns the segment."""
    try:
        stale = shared_memory.SharedMemory(name=name)
        stale.close()
        stale.unlink()
    except FileNotFoundError:
        pass
    shm = shared_memory.SharedMemory(name=name, create=True,
                                     size=SEGMENT_BYTES)
    return QueuePair(shm.buf, a_is_send=True, shm=shm, owner=True)


def attach_shared(name: str, foreign: bool = True) -> QueuePair:
    """Host side; attaches to an existing segment.  With `foreign` set
    (an attach from another process) the segment is unregistered from
    this process's resource tracker, which would otherwise unlink it on
    exit; ownership stays with the creating side."""
    shm = shared_memory.SharedMemory(name=name)
    if foreign:
        try:
            resource_tracker.unregister(shm._name, "shared_memory")
        except Exception:
            pass
    return QueuePair(shm.buf, a_is_send=False, shm=shm, owner=False)


def create_inproc() -> tuple[QueuePair, QueuePair]:
    """Both endpoints over one process-local buffer (test mode)."""
    buf = memoryview(bytearray(SEGMENT_BYTES))
    return QueuePair(buf, a_is_send=True), QueuePair(buf, a_is_send=False)
