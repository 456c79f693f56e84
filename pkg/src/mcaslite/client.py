"""Client library.

A `Session` owns one TCP connection to one shard and is single-owner
(one thread at a time).  Synchronous calls return once the server has
acknowledged; for mutations the acknowledgment means the data is already
persistent.  Asynchronous variants pipeline requests on the same stream
and resolve completions by request id through `check_async_completion`.

Direct transfers move value bytes straight between a registered client
buffer and the socket (`sendall` on a memoryview, `recv_into` on the
way back), so the client performs no intermediate copy of the payload.

`HashRing` offers client-side placement of keys across shard endpoints
by consistent hashing; removing an endpoint only remaps the keys it
owned.
"""

from __future__ import annotations

import bisect
import hashlib
import socket
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

from . import protocol as wire
from .errors import (
    ConnectError,
    McasError,
    NotRegisteredError,
    ProtocolError,
    RangeError,
    Status,
    TooLargeError,
)

_STATUS_TO_ERROR: dict[int, type] = {}


def _error_for(status: int, context: str) -> McasError:
    if not _STATUS_TO_ERROR:
        def walk(cls):
            for sub in cls.__subclasses__():
                _STATUS_TO_ERROR.setdefault(int(sub.status), sub)
                walk(sub)
        walk(McasError)
    exc = _STATUS_TO_ERROR.get(status, McasError)
    return exc(f"{context}: status {Status(status).name}")


def check_status(resp: wire.Response, context: str) -> wire.Response:
    if resp.status != Status.S_OK:
        raise _error_for(int(resp.status), context)
    return resp


@dataclass
class RegisteredBuffer:
    registration_id: int
    view: memoryview

    def __len__(self) -> int:
        return len(self.view)


@dataclass
class AsyncHandle:
    request_id: int
    opcode: int
    done: bool = False
    response: Optional[wire.Response] = None


@dataclass
class _Pending:
    opcode: int
    frames: list = field(default_factory=list)
    sink: Optional[memoryview] = None
    sink_fill: int = 0
    total: int = -1
    done: bool = False


class Session:
    """One connection to one shard endpoint."""

    def __init__(self, addr: Union[str, tuple], timeout: float = 30.0):
        if isinstance(addr, str):
            host, _, port = addr.rpartition(":")
            addr = (host or "127.0.0.1", int(port))
        self.addr = addr
        self.timeout = timeout
        try:
            self.sock = socket.create_connection(addr, timeout=timeout)
        except OSError as exc:
            raise ConnectError(f"cannot reach {addr}: {exc}") from None
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.settimeout(timeout)
        self._next_id = 1
        self._pending: dict[int, _Pending] = {}
        self._registrations: dict[int, RegisteredBuffer] = {}
        self._next_registration = 1
        self._get_allocations = 0
        self.open_pools: set[int] = set()
        resp = self._roundtrip(wire.Handshake())
        check_status(resp, "handshake")

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self) -> "Session":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- request plumbing ---------------------------------------------------

    def _send_msg(self, msg) -> int:
        rid = self._next_id
        self._next_id += 1
        self._pending[rid] = _Pending(opcode=msg.opcode)
        self.sock.sendall(wire.encode_request(msg, rid))
        return rid

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            data = self.sock.recv(min(n, 1 << 20))
            if not data:
                raise ConnectError("server closed the connection")
            chunks.append(data)
            n -= len(data)
        return b"".join(chunks)

    def _recv_into_exact(self, view: memoryview) -> None:
        pos = 0
        while pos < len(view):
            n = self.sock.recv_into(view[pos:])
            if not n:
                raise ConnectError("server closed the connection")
            pos += n

    def _read_one_frame(self) -> int:
        """Reads a single frame into its pending record; returns its rid."""
        opcode, flags, rid, length = wire.unpack_header(
            self._recv_exact(wire.HEADER_SIZE))
        pending = self._pending.get(rid)
        if pending is None:
            raise ProtocolError(f"response for unknown request {rid}")
        if pending.sink is not None and pending.total >= 0:
            # continuation data frame of a direct get: stream into the
            # registered buffer with no intermediate copy
            if pending.sink_fill + length > len(pending.sink):
                raise ProtocolError("server sent more bytes than buffer")
            view = pending.sink[pending.sink_fill:pending.sink_fill + length]
            self._recv_into_exact(view)
            pending.sink_fill += length
            if not flags & wire.FLAG_CONT:
                pending.done = True
            return rid
        payload = self._recv_exact(length)
        frame = wire.Frame(opcode, flags, rid, payload)
        pending.frames.append(frame)
        if pending.sink is not None:
            # first frame of a direct get: status + total length
            (status,) = struct.unpack_from("<I", payload, 0)
            if status != Status.S_OK:
                pending.done = True
                return rid
            (pending.total,) = struct.unpack_from("<Q", payload, 8)
            if pending.total > len(pending.sink):
                raise TooLargeError(
                    f"value of {pending.total} bytes exceeds the buffer")
            if not flags & wire.FLAG_CONT:
                pending.done = True
            return rid
        if not flags & wire.FLAG_CONT:
            pending.done = True
        return rid

    def _wait(self, rid: int) -> wire.Response:
        pending = self._pending[rid]
        while not pending.done:
            self._read_one_frame()
        del self._pending[rid]
        if pending.sink is not None:
            (status,) = struct.unpack_from("<I", pending.frames[0].payload, 0)
            resp = wire.Response(status=Status(status), request_id=rid)
            if status == Status.S_OK:
                if pending.sink_fill != pending.total:
                    raise ProtocolError("direct value truncated")
                resp.value = pending.sink[:pending.total]
            return resp
        return wire.decode_response(pending.frames, pending.opcode)

    def _roundtrip(self, msg) -> wire.Response:
        return self._wait(self._send_msg(msg))

    # -- pool management ---------------------------------------------------------

    def create_pool(self, name: bytes, size: int) -> int:
        resp = check_status(self._roundtrip(wire.CreatePool(name, size)),
                            "create_pool")
        self.open_pools.add(resp.pool)
        return resp.pool

    def open_pool(self, name: bytes, size: int = 0,
                  create_on_demand: bool = False) -> int:
        resp = check_status(
            self._roundtrip(wire.OpenPool(name, size, create_on_demand)),
            "open_pool")
        self.open_pools.add(resp.pool)
        return resp.pool

    def close_pool(self, pool: int) -> None:
        check_status(self._roundtrip(wire.ClosePool(pool)), "close_pool")
        self.open_pools.discard(pool)

    def delete_pool(self, name: bytes) -> None:
        check_status(self._roundtrip(wire.DeletePool(name)), "delete_pool")

    def configure_pool(self, pool: int, command: bytes) -> None:
        check_status(self._roundtrip(wire.ConfigurePool(pool, command)),
                     "configure_pool")

    # -- small synchronous ops ------------------------------------------------------

    def put(self, pool: int, key: bytes, value: bytes,
            no_overwrite: bool = False) -> None:
        if len(value) >= wire.SMALL_LIMIT:
            raise TooLargeError("use put_direct for values >= 2 MiB")
        check_status(self._roundtrip(wire.Put(pool, key, value, no_overwrite)),
                     "put")

    def get(self, pool: int, key: bytes) -> bytes:
        resp = check_status(self._roundtrip(wire.Get(pool, key)), "get")
        self._get_allocations += 1
        return resp.value

    def erase(self, pool: int, key: bytes) -> None:
        check_status(self._roundtrip(wire.Erase(pool, key)), "erase")

    def free_memory(self, value: bytes) -> None:
        """Releases a buffer returned by get; the runtime reclaims the
        bytes, this keeps the allocation accounting explicit."""
        if self._get_allocations <= 0:
            raise RangeError("free_memory without a matching get")
        self._get_allocations -= 1

    @property
    def outstanding_get_buffers(self) -> int:
        return self._get_allocations

    def get_attributes(self, pool: int, key: bytes = b"") -> dict:
        resp = check_status(self._roundtrip(wire.GetAttributes(pool, key)),
                            "get_attributes")
        return {name.decode(): value for name, value in resp.items}

    def get_statistics(self) -> dict:
        resp = check_status(self._roundtrip(wire.GetStatistics()),
                            "get_statistics")
        return {name.decode(): value for name, value in resp.items}

    def find(self, pool: int, expression: bytes, kind: int,
             position: bytes = b"") -> tuple[bytes, bytes]:
        resp = check_status(
            self._roundtrip(wire.Find(pool, expression, kind, position)),
            "find")
        return resp.key, resp.position

    # -- async variants -----------------------------------------------------------------

    def _async(self, msg) -> AsyncHandle:
        rid = self._send_msg(msg)
        return AsyncHandle(rid, msg.opcode)

    def async_put(self, pool: int, key: bytes, value: bytes,
                  no_overwrite: bool = False) -> AsyncHandle:
        if len(value) >= wire.SMALL_LIMIT:
            raise TooLargeError("use async_put_direct for values >= 2 MiB")
        return self._async(wire.Put(pool, key, value, no_overwrite))

    def async_get(self, pool: int, key: bytes) -> AsyncHandle:
        return self._async(wire.Get(pool, key))

    def async_erase(self, pool: int, key: bytes) -> AsyncHandle:
        return self._async(wire.Erase(pool, key))

    def async_invoke_ado(self, pool: int, key: bytes, request: bytes,
                         flags: int = 0, value_size: int = 0) -> AsyncHandle:
        return self._async(wire.InvokeAdo(pool, key, request, flags,
                                          value_size))

    def async_invoke_put_ado(self, pool: int, key: bytes, request: bytes,
                             value: bytes, root_len: int = 0,
                             flags: int = 0) -> AsyncHandle:
        return self._async(wire.InvokePutAdo(pool, key, request, value,
                                             root_len, flags))

    def check_async_completion(self, handle: AsyncHandle) -> bool:
        """Non-blocking completion poll; True once the result is in."""
        if handle.done:
            return True
        pending = self._pending.get(handle.request_id)
        if pending is None:
            raise RangeError("handle already resolved")
        self.sock.setblocking(False)
        try:
            while not pending.done:
                try:
                    self._read_one_frame()
                except (BlockingIOError, socket.timeout):
                    break
        finally:
            self.sock.settimeout(self.timeout)
        if pending.done:
            handle.response = self._wait(handle.request_id)
            handle.done = True
        return handle.done

    def wait_async(self, handle: AsyncHandle) -> wire.Response:
        if not handle.done:
            handle.response = self._wait(handle.request_id)
            handle.done = True
        return check_status(handle.response, "async op")

    # -- direct (zero-copy) transfers ------------------------------------------------------

    def register_direct_memory(self, buffer) -> RegisteredBuffer:
        view = memoryview(buffer)
        if view.readonly:
            raise RangeError("registered memory must be writable")
        reg = RegisteredBuffer(self._next_registration, view)
        self._next_registration += 1
        self._registrations[reg.registration_id] = reg
        return reg

    def unregister_direct_memory(self, reg: RegisteredBuffer) -> None:
        self._registrations.pop(reg.registration_id, None)

    def _check_registered(self, reg: RegisteredBuffer, length: int) -> None:
        if reg.registration_id not in self._registrations:
            raise NotRegisteredError("buffer is not registered")
        if length > len(reg.view):
            raise RangeError("range exceeds the registered buffer")

    def _send_value_frame(self, msg_prefix: bytes, opcode: int,
                          view: memoryview) -> int:
        rid = self._next_id
        self._next_id += 1
        self._pending[rid] = _Pending(opcode=opcode)
        header = wire.HEADER.pack(wire.MAGIC, wire.PROTO_VERSION, opcode, 0,
                                  rid, 0, len(msg_prefix) + len(view))
        self.sock.sendall(header + msg_prefix)
        if len(view):
            self.sock.sendall(view)  # value bytes leave the buffer directly
        return rid

    def put_direct(self, pool: int, key: bytes, reg: RegisteredBuffer,
                   length: Optional[int] = None) -> None:
        self.wait_async(self.async_put_direct(pool, key, reg, length))

    def async_put_direct(self, pool: int, key: bytes, reg: RegisteredBuffer,
                         length: Optional[int] = None) -> AsyncHandle:
        length = len(reg.view) if length is None else length
        self._check_registered(reg, length)
        if length > wire.DIRECT_LIMIT:
            raise TooLargeError("direct transfers cap at 1 GiB")
        prefix = struct.pack("<QIIQ", pool, 0, len(key), length) + key
        rid = self._send_value_frame(prefix, wire.OP_PUT_DIRECT,
                                     reg.view[:length])
        return AsyncHandle(rid, wire.OP_PUT_DIRECT)

    def get_direct(self, pool: int, key: bytes,
                   reg: RegisteredBuffer) -> memoryview:
        resp = self.wait_async(self.async_get_direct(pool, key, reg))
        return resp.value

    def async_get_direct(self, pool: int, key: bytes,
                         reg: RegisteredBuffer) -> AsyncHandle:
        self._check_registered(reg, 0)
        rid = self._send_msg(wire.GetDirect(pool, key))
        self._pending[rid].sink = reg.view
        return AsyncHandle(rid, wire.OP_GET_DIRECT)

    def put_direct_offset(self, pool: int, key: bytes, offset: int,
                          reg: RegisteredBuffer, length: int) -> None:
        self.wait_async(
            self.async_put_direct_offset(pool, key, offset, reg, length))

    def async_put_direct_offset(self, pool: int, key: bytes, offset: int,
                                reg: RegisteredBuffer,
                                length: int) -> AsyncHandle:
        self._check_registered(reg, length)
        prefix = struct.pack("<QQIQ", pool, offset, len(key), length) + key
        rid = self._send_value_frame(prefix, wire.OP_PUT_DIRECT_OFFSET,
                                     reg.view[:length])
        return AsyncHandle(rid, wire.OP_PUT_DIRECT_OFFSET)

    def get_direct_offset(self, pool: int, key: bytes, offset: int,
                          length: int) -> bytes:
        resp = check_status(
            self._roundtrip(wire.GetDirectOffset(pool, key, offset, length)),
            "get_direct_offset")
        return resp.value

    def async_get_direct_offset(self, pool: int, key: bytes, offset: int,
                                length: int) -> AsyncHandle:
        return self._async(wire.GetDirectOffset(pool, key, offset, length))

    # -- ADO invocation ---------------------------------------------------------------------

    def invoke_ado(self, pool: int, key: bytes, request: bytes,
                   flags: int = 0, value_size: int = 0) -> list[bytes]:
        resp = check_status(
            self._roundtrip(wire.InvokeAdo(pool, key, request, flags,
                                           value_size)), "invoke_ado")
        return resp.buffers

    def invoke_put_ado(self, pool: int, key: bytes, request: bytes,
                       value: bytes, root_len: int = 0,
                       flags: int = 0) -> list[bytes]:
        resp = check_status(
            self._roundtrip(wire.InvokePutAdo(pool, key, request, value,
                                              root_len, flags)),
            "invoke_put_ado")
        return resp.buffers


class HashRing:
    """Consistent-hash placement of keys over shard endpoints."""

    def __init__(self, endpoints: list[str], replicas: int = 64):
        self.replicas = replicas
        self._points: list[tuple[int, str]] = []
        for endpoint in endpoints:
            self.add(endpoint)

    @staticmethod
    def _hash(data: bytes) -> int:
        return int.from_bytes(
            hashlib.blake2b(data, digest_size=8).digest(), "little")

    def add(self, endpoint: str) -> None:
        for i in range(self.replicas):
            point = self._hash(f"{endpoint}#{i}".encode())
            bisect.insort(self._points, (point, endpoint))

    def remove(self, endpoint: str) -> None:
        self._points = [(p, e) for p, e in self._points if e != endpoint]

    def shard_of(self, key: bytes) -> str:
        if not self._points:
            raise RangeError("empty ring")
        h = self._hash(key)
        i = bisect.bisect_right(self._points, (h, chr(0x10FFFF)))
        if i == len(self._points):
            i = 0
        return self._points[i][1]
