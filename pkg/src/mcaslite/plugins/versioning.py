"""Multi-version values: server plugin plus client adapter.

Each versioned key's stored value is a fixed-size root record; the actual
version payloads live in plugin-heap allocations referenced from the
root's slot ring.  A put links the incoming detached value as the newest
version and frees the displaced oldest one; a get resolves version index
0 (latest), -1 (one back), ... around the ring.

Root record layout (little-endian)::

    0    magic          u64  "MCVROOT1"
    8    current_slot   u64  next write position
    16   version_count  u64  saturates at max_versions
    24   undo           mid_tx u64, slot u64, off u64, len u64,
                        ts u64, count u64                       (48 bytes)
    72   slots          max_versions x (off u64, len u64, ts u64)

Slot updates follow an undo protocol: the displaced slot's prior contents
(and the prior ring position) persist into the undo area, the mid_tx flag
is set last; recovery at the next invocation copies them back and clears
the flag, so any crash lands on the exact pre-put or post-put history.
The displaced payload is freed only after the transaction clears, which
can leak one allocation if the crash lands exactly between commit and
free; history remains correct.

Wire format of the personality messages (length-prefixed, carried as the
opaque ADO request/response): request = op u32 (1 put, 2 get) + i32
version index for get; response = status u32 (0 ok, 1 no-such-version)
+ timestamp u64 + value bytes for get.
"""

from __future__ import annotations

import struct
import time

from ..ado import AdoPlugin
from ..errors import AdoFaultError, McasError
from ..protocol import ADO_FLAG_DETACHED

_MAGIC = int.from_bytes(b"MCVROOT1", "little")

DEFAULT_MAX_VERSIONS = 8

OP_VPUT = 1
OP_VGET = 2
VERR_OK = 0
VERR_NO_VERSION = 1

_HDR = struct.Struct("<QQQ")          # magic, current_slot, version_count
_UNDO = struct.Struct("<QQQQQQ")      # mid_tx, slot, off, len, ts, count
_SLOT = struct.Struct("<QQQ")         # off, len, ts
UNDO_OFF = 24
SLOTS_OFF = 72


def root_len(max_versions: int = DEFAULT_MAX_VERSIONS) -> int:
    return SLOTS_OFF + max_versions * _SLOT.size


class NoVersionError(McasError):
    pass


class VersionRoot:
    """Accessor for a root record at a fixed pool-memory offset."""

    def __init__(self, memory, base: int, max_versions: int):
        self.memory = memory
        self.base = base
        self.max_versions = max_versions

    def init(self) -> None:
        self.memory.write(self.base, bytes(root_len(self.max_versions)))
        self.memory.write(self.base, _HDR.pack(_MAGIC, 0, 0))
        self.memory.persist(self.base, root_len(self.max_versions))

    def _slot_off(self, slot: int) -> int:
        return self.base + SLOTS_OFF + slot * _SLOT.size

    def _read_hdr(self) -> tuple[int, int, int]:
        magic, current, count = _HDR.unpack(self.memory.read(self.base, 24))
        if magic != _MAGIC:
            raise AdoFaultError("value is not a version root")
        return magic, current, count

    def check_recovery(self) -> None:
        self._read_hdr()
        mid_tx, slot, off, length, ts, count = _UNDO.unpack(
            self.memory.read(self.base + UNDO_OFF, _UNDO.size))
        if not mid_tx:
            return
        self.memory.write(self._slot_off(slot), _SLOT.pack(off, length, ts))
        self.memory.persist(self._slot_off(slot), _SLOT.size)
        self.memory.write(self.base + 8, struct.pack("<QQ", slot, count))
        self.memory.persist(self.base + 8, 16)
        self.memory.write(self.base + UNDO_OFF, struct.pack("<Q", 0))
        self.memory.persist(self.base + UNDO_OFF, 8)

    def add_version(self, off: int, length: int) -> tuple[int, int]:
        """Link a new payload; returns the displaced (offset, length)
        (offset 0 when the slot was empty)."""
        _, current, count = self._read_hdr()
        old_off, old_len, old_ts = _SLOT.unpack(
            self.memory.read(self._slot_off(current), _SLOT.size))
        # arm: save the slot being overwritten plus the ring position
        self.memory.write(self.base + UNDO_OFF + 8, struct.pack(
            "<QQQQQ", current, old_off, old_len, old_ts, count))
        self.memory.persist(self.base + UNDO_OFF + 8, 40)
        self.memory.write(self.base + UNDO_OFF, struct.pack("<Q", 1))
        self.memory.persist(self.base + UNDO_OFF, 8)
        # transaction: slot contents, then ring position, then count
        now = time.monotonic_ns()
        self.memory.write(self._slot_off(current), _SLOT.pack(off, length, now))
        self.memory.persist(self._slot_off(current), _SLOT.size)
        new_count = min(count + 1, self.max_versions)
        self.memory.write(self.base + 8, struct.pack(
            "<QQ", (current + 1) % self.max_versions, new_count))
        self.memory.persist(self.base + 8, 16)
        # disarm
        self.memory.write(self.base + UNDO_OFF, struct.pack("<Q", 0))
        self.memory.persist(self.base + UNDO_OFF, 8)
        return old_off, old_len

    def get_version(self, version_index: int) -> tuple[int, int, int]:
        """(offset, length, timestamp); index 0 latest, -k k back."""
        _, current, count = self._read_hdr()
        back = -version_index
        if version_index > 0 or back >= count:
            raise NoVersionError(f"no version {version_index}")
        slot = (current - 1 - back) % self.max_versions
        off, length, ts = _SLOT.unpack(
            self.memory.read(self._slot_off(slot), _SLOT.size))
        return off, length, ts


class VersioningPlugin(AdoPlugin):
    def __init__(self, index, params):
        super().__init__(index, params)
        self.max_versions = int(params.get("max_versions",
                                           DEFAULT_MAX_VERSIONS))

    def do_work(self, ctx, work_id, key, values, request, new_root):
        root_off, root_sz = values[0]
        if root_sz < root_len(self.max_versions):
            raise AdoFaultError("root value too small for version ring")
        root = VersionRoot(self.memory, root_off, self.max_versions)
        if new_root:
            root.init()
        else:
            root.check_recovery()
        (op,) = struct.unpack_from("<I", request, 0)
        if op == OP_VPUT:
            if len(values) < 2:
                raise AdoFaultError("put needs a detached value")
            det_off, det_len = values[1]
            old_off, _old_len = root.add_version(det_off, det_len)
            if old_off:
                ctx.free_memory(old_off)
            return [struct.pack("<I", VERR_OK)]
        if op == OP_VGET:
            (index,) = struct.unpack_from("<i", request, 4)
            try:
                off, length, ts = root.get_version(index)
            except NoVersionError:
                return [struct.pack("<IQ", VERR_NO_VERSION, 0)]
            value = self.memory.read(off, length) if length else b""
            return [struct.pack("<IQ", VERR_OK, ts) + value]
        raise AdoFaultError(f"unknown versioning op {op}")


PLUGIN = VersioningPlugin


class VersioningClient:
    """Client adapter: vput/vget on top of the ADO invocation APIs."""

    def __init__(self, session, pool: int,
                 max_versions: int = DEFAULT_MAX_VERSIONS):
        self.session = session
        self.pool = pool
        self.max_versions = max_versions

    def vput(self, key: bytes, value: bytes) -> None:
        buffers = self.session.invoke_put_ado(
            self.pool, key, struct.pack("<I", OP_VPUT), value,
            root_len=root_len(self.max_versions), flags=ADO_FLAG_DETACHED)
        (status,) = struct.unpack_from("<I", buffers[0], 0)
        if status != VERR_OK:
            raise AdoFaultError(f"vput failed ({status})")

    def vget(self, key: bytes, version_index: int = 0) -> tuple[bytes, int]:
        buffers = self.session.invoke_ado(
            self.pool, key, struct.pack("<Ii", OP_VGET, version_index))
        status, ts = struct.unpack_from("<IQ", buffers[0], 0)
        if status == VERR_NO_VERSION:
            raise NoVersionError(f"no version {version_index}")
        return buffers[0][12:], ts
