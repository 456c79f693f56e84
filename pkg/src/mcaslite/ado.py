"""Active Data Object runtime.

Plugins run in a host: a separate OS process per pool in production
(`python -m mcaslite.ado <json-spec>`), or a thread behind the same queue
abstraction in test mode.  The host maps the pool's arena extents and
upcalls `do_work`; every effect on the primary index flows back to the
shard thread as a callback message, never as a direct mutation, and the
shard never dereferences plugin-supplied addresses.

Queue messages are fixed struct encodings (no object serialization), so
a malformed or hostile stream can at worst produce an error status.

Work targets arrive write-locked by the shard; keys touched through
create/open callbacks are locked too and join the work's deferred-unlock
list, drained when the completion message arrives.
"""

from __future__ import annotations

import json
import logging
import struct
import subprocess
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from importlib import import_module
from typing import Optional

from . import uipc
from .arena import MappedFileBackend
from .errors import (
    AdoFaultError,
    McasError,
    NoMatchError,
    RangeError,
    Status,
    status_of,
)

log = logging.getLogger("mcaslite.ado")

MSG_WORK = 1
MSG_WORK_DONE = 2
MSG_CALLBACK = 3
MSG_CALLBACK_REPLY = 4
MSG_CLUSTER_EVENT = 5
MSG_SHUTDOWN = 6

FL_NEW_ROOT = 0x1

SIGNAL_PREFIX = b"ADO::Signal"

CB_CREATE_KEY = 1
CB_OPEN_KEY = 2
CB_ERASE_KEY = 3
CB_RESIZE_VALUE = 4
CB_ALLOC = 5
CB_FREE = 6
CB_GET_REF_VECTOR = 7
CB_ITERATE = 8
CB_FIND_KEY = 9
CB_GET_POOL_INFO = 10
CB_UNLOCK = 11

_WORK = struct.Struct("<QIIIII")
_DESC = struct.Struct("<QQ")
_DONE = struct.Struct("<QII")
_CB = struct.Struct("<IQQQII")
_CB_REPLY = struct.Struct("<IQQI")


@dataclass
class WorkRequest:
    work_id: int
    plugin_index: int
    key: bytes
    values: list[tuple[int, int]]  # [0] target, [1] detached if present
    request: bytes
    new_root: bool = False

    def encode(self) -> bytes:
        flags = FL_NEW_ROOT if self.new_root else 0
        parts = [_WORK.pack(self.work_id, self.plugin_index, flags,
                            len(self.key), len(self.request),
                            len(self.values))]
        for off, length in self.values:
            parts.append(_DESC.pack(off, length))
        parts.append(self.key)
        parts.append(self.request)
        return b"".join(parts)

    @classmethod
    def decode(cls, raw: bytes) -> "WorkRequest":
        work_id, plugin, flags, key_len, req_len, ndesc = _WORK.unpack_from(raw)
        pos = _WORK.size
        values = []
        for _ in range(ndesc):
            values.append(_DESC.unpack_from(raw, pos))
            pos += _DESC.size
        key = raw[pos:pos + key_len]
        request = raw[pos + key_len:pos + key_len + req_len]
        return cls(work_id, plugin, key, values, request,
                   bool(flags & FL_NEW_ROOT))


@dataclass
class WorkResponse:
    work_id: int
    status: int
    buffers: list[bytes] = field(default_factory=list)

    def encode(self) -> bytes:
        parts = [_DONE.pack(self.work_id, self.status, len(self.buffers))]
        for buf in self.buffers:
            parts.append(struct.pack("<I", len(buf)))
            parts.append(buf)
        return b"".join(parts)

    @classmethod
    def decode(cls, raw: bytes) -> "WorkResponse":
        work_id, status, nbuf = _DONE.unpack_from(raw)
        pos = _DONE.size
        buffers = []
        for _ in range(nbuf):
            (length,) = struct.unpack_from("<I", raw, pos)
            buffers.append(raw[pos + 4:pos + 4 + length])
            pos += 4 + length
        return cls(work_id, status, buffers)


@dataclass
class CallbackRequest:
    kind: int
    work_id: int
    a: int = 0
    b: int = 0
    key: bytes = b""
    data: bytes = b""

    def encode(self) -> bytes:
        return _CB.pack(self.kind, self.work_id, self.a, self.b,
                        len(self.key), len(self.data)) + self.key + self.data

    @classmethod
    def decode(cls, raw: bytes) -> "CallbackRequest":
        kind, work_id, a, b, key_len, data_len = _CB.unpack_from(raw)
        pos = _CB.size
        key = raw[pos:pos + key_len]
        data = raw[pos + key_len:pos + key_len + data_len]
        return cls(kind, work_id, a, b, key, data)


@dataclass
class CallbackReply:
    status: int
    a: int = 0
    b: int = 0
    data: bytes = b""

    def encode(self) -> bytes:
        return _CB_REPLY.pack(self.status, self.a, self.b, len(self.data)) \
            + self.data

    @classmethod
    def decode(cls, raw: bytes) -> "CallbackReply":
        status, a, b, data_len = _CB_REPLY.unpack_from(raw)
        return cls(status, a, b, raw[_CB_REPLY.size:_CB_REPLY.size + data_len])


def pack_ref_vector(items: list[tuple[bytes, int, int]]) -> bytes:
    parts = [struct.pack("<I", len(items))]
    for key, off, length in items:
        parts.append(struct.pack("<I", len(key)))
        parts.append(key)
        parts.append(_DESC.pack(off, length))
    return b"".join(parts)


def unpack_ref_vector(raw: bytes) -> list[tuple[bytes, int, int]]:
    (count,) = struct.unpack_from("<I", raw, 0)
    pos = 4
    items = []
    for _ in range(count):
        (key_len,) = struct.unpack_from("<I", raw, pos)
        key = raw[pos + 4:pos + 4 + key_len]
        pos += 4 + key_len
        off, length = _DESC.unpack_from(raw, pos)
        pos += _DESC.size
        items.append((key, off, length))
    return items


def pack_pair(key: bytes, value: bytes) -> bytes:
    return struct.pack("<II", len(key), len(value)) + key + value


def unpack_pair(raw: bytes) -> tuple[bytes, bytes]:
    key_len, val_len = struct.unpack_from("<II", raw, 0)
    return raw[8:8 + key_len], raw[8 + key_len:8 + key_len + val_len]


# -- pool memory ----------------------------------------------------------------

class PoolMemory:
    """Byte access restricted to one pool's arena extents."""

    def __init__(self, accessor, extents: list[tuple[int, int]]):
        self._acc = accessor
        self.extents = sorted(extents)

    def _check(self, offset: int, length: int) -> None:
        for off, ln in self.extents:
            if off <= offset and offset + length <= off + ln:
                return
        raise RangeError(f"[{offset}, +{length}) outside pool mapping")

    def read(self, offset: int, length: int) -> bytes:
        self._check(offset, length)
        return self._acc.read(offset, length)

    def write(self, offset: int, data: bytes) -> None:
        self._check(offset, len(data))
        self._acc.write(offset, data)

    def persist(self, offset: int, length: int) -> None:
        self._check(offset, length)
        self._acc.persist(offset, length)


# -- plugin interface --------------------------------------------------------------

class AdoPlugin:
    """Base class for server-side plugins."""

    def __init__(self, index: int, params: dict):
        self.index = index
        self.params = params
        self.memory: Optional[PoolMemory] = None

    def register_mapped_memory(self, memory: PoolMemory) -> None:
        self.memory = memory

    def do_work(self, ctx: "AdoContext", work_id: int, key: bytes,
                values: list[tuple[int, int]], request: bytes,
                new_root: bool) -> list[bytes]:
        raise NotImplementedError

    def cluster_event(self, sender: str, kind: str, message: str) -> None:
        pass

    def shutdown(self) -> None:
        pass


class AdoContext:
    """Callback channel handed to do_work; methods run on the shard."""

    def __init__(self, queue: uipc.QueuePair, work_id: int,
                 memory: PoolMemory):
        self._queue = queue
        self.work_id = work_id
        self.memory = memory

    def _call(self, kind: int, a: int = 0, b: int = 0, key: bytes = b"",
              data: bytes = b"") -> CallbackReply:
        req = CallbackRequest(kind, self.work_id, a, b, key, data)
        self._queue.send(MSG_CALLBACK, req.encode())
        while True:
            got = self._queue.recv(timeout=30.0)
            if got is None:
                raise AdoFaultError("shard did not answer callback")
            msg_kind, payload = got
            if msg_kind == MSG_CALLBACK_REPLY:
                reply = CallbackReply.decode(payload)
                if reply.status != Status.S_OK:
                    raise _status_error(reply.status)
                return reply
            log.warning("unexpected message %d while awaiting callback reply",
                        msg_kind)

    def create_key(self, key: bytes, size: int) -> tuple[int, int]:
        reply = self._call(CB_CREATE_KEY, a=size, key=key)
        return reply.a, reply.b

    def open_key(self, key: bytes) -> tuple[int, int]:
        reply = self._call(CB_OPEN_KEY, key=key)
        return reply.a, reply.b

    def erase_key(self, key: bytes) -> None:
        self._call(CB_ERASE_KEY, key=key)

    def resize_value(self, key: bytes, new_size: int) -> tuple[int, int]:
        reply = self._call(CB_RESIZE_VALUE, a=new_size, key=key)
        return reply.a, reply.b

    def allocate_memory(self, size: int) -> int:
        return self._call(CB_ALLOC, a=size).a

    def free_memory(self, offset: int) -> None:
        self._call(CB_FREE, a=offset)

    def get_ref_vector(self) -> list[tuple[bytes, int, int]]:
        return unpack_ref_vector(self._call(CB_GET_REF_VECTOR).data)

    def iterate(self, after: bytes = b"") -> Optional[tuple[bytes, bytes]]:
        try:
            reply = self._call(CB_ITERATE, key=after)
        except NoMatchError:
            return None
        return unpack_pair(reply.data)

    def find_key(self, expression: bytes, kind: int,
                 position: bytes = b"") -> tuple[bytes, bytes]:
        reply = self._call(CB_FIND_KEY, a=kind, key=position, data=expression)
        return reply.data, reply.data

    def get_pool_info(self) -> dict:
        return json.loads(self._call(CB_GET_POOL_INFO).data)

    def unlock(self, key: bytes) -> None:
        self._call(CB_UNLOCK, key=key)


_STATUS_ERRORS: dict[int, type] = {}


def _status_error(status: int) -> McasError:
    if not _STATUS_ERRORS:
        def walk(cls):
            for sub in cls.__subclasses__():
                _STATUS_ERRORS.setdefault(int(sub.status), sub)
                walk(sub)
        _STATUS_ERRORS[int(Status.E_PROTOCOL)] = McasError
        walk(McasError)
    exc = _STATUS_ERRORS.get(status, McasError)
    return exc(f"callback failed with status {status}")


# -- plugin loading ------------------------------------------------------------------

def load_plugin(spec: str, index: int, params: dict) -> AdoPlugin:
    """Load "package.module" (uses its PLUGIN attribute) or
    "package.module:ClassName"."""
    module_name, _, attr = spec.partition(":")
    module = import_module(module_name)
    cls = getattr(module, attr) if attr else getattr(module, "PLUGIN")
    return cls(index, params)


# -- host ----------------------------------------------------------------------------

class AdoHost:
    """Receives works, upcalls plugins, relays callbacks."""

    def __init__(self, queue: uipc.QueuePair, plugins: list[AdoPlugin],
                 memory: PoolMemory):
        self.queue = queue
        self.plugins = plugins
        self.memory = memory
        for plugin in plugins:
            plugin.register_mapped_memory(memory)

    def run(self) -> None:
        while True:
            got = self.queue.recv(timeout=0.5)
            if got is None:
                continue
            kind, payload = got
            if kind == MSG_SHUTDOWN:
                for plugin in self.plugins:
                    plugin.shutdown()
                return
            if kind == MSG_CLUSTER_EVENT:
                self._cluster_event(payload)
                continue
            if kind != MSG_WORK:
                log.warning("host ignoring message kind %d", kind)
                continue
            work = WorkRequest.decode(payload)
            ctx = AdoContext(self.queue, work.work_id, self.memory)
            try:
                plugin = self.plugins[work.plugin_index]
                buffers = plugin.do_work(ctx, work.work_id, work.key,
                                         work.values, work.request,
                                         work.new_root)
                resp = WorkResponse(work.work_id, int(Status.S_OK),
                                    list(buffers or []))
            except Exception as exc:
                log.exception("plugin fault in work %d", work.work_id)
                resp = WorkResponse(work.work_id, int(status_of(exc)))
            self.queue.send(MSG_WORK_DONE, resp.encode())

    def _cluster_event(self, payload: bytes) -> None:
        s_len, t_len, m_len = struct.unpack_from("<III", payload, 0)
        pos = 12
        sender = payload[pos:pos + s_len].decode()
        kind = payload[pos + s_len:pos + s_len + t_len].decode()
        message = payload[pos + s_len + t_len:
                          pos + s_len + t_len + m_len].decode()
        for plugin in self.plugins:
            try:
                plugin.cluster_event(sender, kind, message)
            except Exception:
                log.exception("plugin cluster_event fault")


def encode_cluster_event(sender: str, kind: str, message: str) -> bytes:
    s, t, m = sender.encode(), kind.encode(), message.encode()
    return struct.pack("<III", len(s), len(t), len(m)) + s + t + m


def host_main(argv=None) -> int:
    """Subprocess entry: mcaslite.ado '<json spec>'."""
    spec = json.loads((argv or sys.argv)[1])
    if spec.get("ado_path"):
        sys.path.insert(0, spec["ado_path"])
    queue = uipc.attach_shared(spec["shm_name"])
    backend = MappedFileBackend(spec["arena_path"], spec["arena_capacity"],
                                create=False)
    memory = PoolMemory(backend, [tuple(e) for e in spec["extents"]])
    plugins = [load_plugin(name, i, spec.get("ado_params", {}))
               for i, name in enumerate(spec["plugins"])]
    host = AdoHost(queue, plugins, memory)
    try:
        host.run()
    finally:
        queue.close()
        backend.close()
    return 0


# -- shard-side manager -----------------------------------------------------------------

class AdoManager:
    """Launches and talks to one pool's ADO host."""

    def __init__(self, shard_index: int, pool_id: int, plugins: list[str],
                 params: dict, mode: str, ado_path: str,
                 arena_path: Optional[str], arena_capacity: int,
                 extents: list[tuple[int, int]],
                 inproc_accessor=None):
        self.shard_index = shard_index
        self.pool_id = pool_id
        self.plugin_specs = plugins
        self.params = params
        self.mode = mode
        self.ado_path = ado_path
        self.arena_path = arena_path
        self.arena_capacity = arena_capacity
        self.extents = extents
        self.inproc_accessor = inproc_accessor
        self.queue: Optional[uipc.QueuePair] = None
        self.process: Optional[subprocess.Popen] = None
        self.thread: Optional[threading.Thread] = None
        self.inproc_plugins: list[AdoPlugin] = []
        self._rr = 0
        # one work in the queue at a time: the host handles works
        # serially anyway (callbacks are synchronous per work), and a
        # single outstanding spill keeps the scratch area single-writer
        self.outstanding = 0
        self.backlog: deque = deque()

    # round-robin schedule across configured plugins
    def next_plugin(self) -> int:
        index = self._rr
        self._rr = (self._rr + 1) % max(1, len(self.plugin_specs))
        return index

    def alive(self) -> bool:
        if self.queue is None:
            return False
        if self.mode == "process":
            return self.process is not None and self.process.poll() is None
        return self.thread is not None and self.thread.is_alive()

    def ensure_running(self) -> None:
        if self.alive():
            return
        if not self.plugin_specs:
            raise AdoFaultError("no ado_plugins configured for this shard")
        if self.mode == "process":
            if self.arena_path is None:
                raise AdoFaultError(
                    "process-mode ADO needs a file-backed arena")
            name = uipc.segment_name(self.shard_index, self.pool_id)
            self.queue = uipc.create_shared(name)
            spec = {
                "shm_name": name,
                "arena_path": self.arena_path,
                "arena_capacity": self.arena_capacity,
                "extents": [list(e) for e in self.extents],
                "plugins": self.plugin_specs,
                "ado_params": self.params,
                "ado_path": self.ado_path,
            }
            self.process = subprocess.Popen(
                [sys.executable, "-m", "mcaslite.ado", json.dumps(spec)])
        else:
            if self.ado_path and self.ado_path not in sys.path:
                sys.path.insert(0, self.ado_path)
            shard_side, host_side = uipc.create_inproc()
            self.queue = shard_side
            memory = PoolMemory(self.inproc_accessor, self.extents)
            self.inproc_plugins = [
                load_plugin(name, i, self.params)
                for i, name in enumerate(self.plugin_specs)]
            host = AdoHost(host_side, self.inproc_plugins, memory)
            self.thread = threading.Thread(target=host.run, daemon=True,
                                           name=f"ado-{self.pool_id}")
            self.thread.start()

    def send_work(self, work: WorkRequest) -> None:
        self.ensure_running()
        if self.outstanding:
            self.backlog.append(work)
        else:
            self.outstanding = 1
            self.queue.send(MSG_WORK, work.encode())

    def work_finished(self) -> None:
        """Completion seen; dispatch the next backlogged work, if any."""
        self.outstanding = 0
        if self.backlog and self.queue is not None:
            self.outstanding = 1
            self.queue.send(MSG_WORK, self.backlog.popleft().encode())

    def send_callback_reply(self, reply: CallbackReply) -> None:
        self.queue.send(MSG_CALLBACK_REPLY, reply.encode())

    def send_cluster_event(self, sender: str, kind: str, message: str) -> None:
        self.ensure_running()
        self.queue.send(MSG_CLUSTER_EVENT,
                        encode_cluster_event(sender, kind, message))

    def poll(self) -> list[tuple[int, bytes]]:
        if self.queue is None:
            return []
        out = []
        while True:
            got = self.queue.try_recv()
            if got is None:
                break
            out.append(got)
        return out

    def shutdown(self, wait: float = 2.0) -> None:
        if self.queue is not None:
            try:
                self.queue.try_send(MSG_SHUTDOWN, b"")
            except Exception:
                pass
        if self.process is not None:
            try:
                self.process.wait(timeout=wait)
            except subprocess.TimeoutExpired:
                self.process.kill()
                self.process.wait()
            self.process = None
        if self.thread is not None:
            self.thread.join(timeout=wait)
            self.thread = None
        if self.queue is not None:
            self.queue.close()
            self.queue = None
        self.outstanding = 0
        self.backlog.clear()


def main() -> int:
    logging.basicConfig(level=logging.INFO)
    return host_main()


if __name__ == "__main__":
    sys.exit(main())
