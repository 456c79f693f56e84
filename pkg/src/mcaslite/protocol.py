"""Framed binary wire protocol.

Byte-exact layout documented in PROTOCOL.md.  Every frame is a 32-byte
header followed by `payload_len` bytes, little-endian throughout::

    0   magic        4s   "MCA2"
    4   version      u8   1
    5   opcode       u8
    6   flags        u16  bit 0: continuation frames follow (same request)
    8   request_id   u64  echoed in the matching response
    16  auth         u32  reserved, 0
    20  pad          4x
    24  payload_len  u64

Responses reuse one opcode (RESPONSE); their payload starts with a status
u32 + 4 reserved bytes and continues with fields determined by the
request's opcode.  Large GET_DIRECT values stream as continuation frames
of at most 1 MiB after a first frame carrying status and total length.

Mutating requests are acknowledged only after the server has persisted
their effects: a status frame on the wire is a durability receipt.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import ProtocolError, Status

MAGIC = b"MCA2"
PROTO_VERSION = 1
HEADER = struct.Struct("<4sBBHQI4xQ")
HEADER_SIZE = 32
CHUNK = 1 << 20
MAX_FRAME = (1 << 30) + (1 << 16)
SMALL_LIMIT = 2 << 20      # non-direct put/get values must be < 2 MiB
DIRECT_LIMIT = 1 << 30     # transport cap for direct transfers

FLAG_CONT = 0x1

# ADO invocation flags
ADO_FLAG_DETACHED = 0x1

OP_HANDSHAKE = 1
OP_CREATE_POOL = 2
OP_OPEN_POOL = 3
OP_CLOSE_POOL = 4
OP_DELETE_POOL = 5
OP_CONFIGURE_POOL = 6
OP_PUT = 7
OP_GET = 8
OP_ERASE = 9
OP_PUT_DIRECT = 10
OP_GET_DIRECT = 11
OP_PUT_DIRECT_OFFSET = 12
OP_GET_DIRECT_OFFSET = 13
OP_INVOKE_ADO = 14
OP_INVOKE_PUT_ADO = 15
OP_GET_ATTRIBUTES = 16
OP_GET_STATISTICS = 17
OP_FIND = 18
OP_RESPONSE = 32

OPCODE_NAMES = {
    OP_HANDSHAKE: "handshake", OP_CREATE_POOL: "create_pool",
    OP_OPEN_POOL: "open_pool", OP_CLOSE_POOL: "close_pool",
    OP_DELETE_POOL: "delete_pool", OP_CONFIGURE_POOL: "configure_pool",
    OP_PUT: "put", OP_GET: "get", OP_ERASE: "erase",
    OP_PUT_DIRECT: "put_direct", OP_GET_DIRECT: "get_direct",
    OP_PUT_DIRECT_OFFSET: "put_direct_offset",
    OP_GET_DIRECT_OFFSET: "get_direct_offset",
    OP_INVOKE_ADO: "invoke_ado", OP_INVOKE_PUT_ADO: "invoke_put_ado",
    OP_GET_ATTRIBUTES: "get_attributes", OP_GET_STATISTICS: "get_statistics",
    OP_FIND: "find", OP_RESPONSE: "response",
}


@dataclass
class Frame:
    opcode: int
    flags: int
    request_id: int
    payload: bytes


def pack_frame(opcode: int, request_id: int, payload: bytes,
               flags: int = 0) -> bytes:
    return HEADER.pack(MAGIC, PROTO_VERSION, opcode, flags, request_id, 0,
                       len(payload)) + payload


def unpack_header(raw: bytes) -> tuple[int, int, int, int]:
    """(opcode, flags, request_id, payload_len); raises on bad magic."""
    magic, version, opcode, flags, request_id, _auth, length = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != PROTO_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if length > MAX_FRAME:
        raise ProtocolError(f"overlength frame ({length} bytes)")
    return opcode, flags, request_id, length


def split_frames(data: bytes) -> list[Frame]:
    """Parse a byte string holding whole frames (test/corpus helper)."""
    frames = []
    pos = 0
    while pos < len(data):
        if len(data) - pos < HEADER_SIZE:
            raise ProtocolError("truncated header")
        opcode, flags, request_id, length = unpack_header(
            data[pos:pos + HEADER_SIZE])
        pos += HEADER_SIZE
        if len(data) - pos < length:
            raise ProtocolError("truncated payload")
        frames.append(Frame(opcode, flags, request_id, data[pos:pos + length]))
        pos += length
    return frames


# -- request messages --------------------------------------------------------

@dataclass
class Handshake:
    opcode = OP_HANDSHAKE
    version: int = PROTO_VERSION

    def encode_body(self) -> bytes:
        return struct.pack("<I", self.version)

    @classmethod
    def decode_body(cls, body: bytes) -> "Handshake":
        (version,) = _unpack("<I", body, 0)
        return cls(version)


@dataclass
class CreatePool:
    opcode = OP_CREATE_POOL
    name: bytes
    size: int
    flags: int = 0

    def encode_body(self) -> bytes:
        return struct.pack("<QII", self.size, self.flags, len(self.name)) \
            + self.name

    @classmethod
    def decode_body(cls, body: bytes) -> "CreatePool":
        size, flags, name_len = _unpack("<QII", body, 0)
        name = _take(body, 16, name_len)
        if not name:
            raise ProtocolError("pool name must be non-empty")
        return cls(name, size, flags)


@dataclass
class OpenPool:
    opcode = OP_OPEN_POOL
    name: bytes
    size: int = 0
    create_on_demand: bool = False

    def encode_body(self) -> bytes:
        flags = 1 if self.create_on_demand else 0
        return struct.pack("<QII", self.size, flags, len(self.name)) + self.name

    @classmethod
    def decode_body(cls, body: bytes) -> "OpenPool":
        size, flags, name_len = _unpack("<QII", body, 0)
        name = _take(body, 16, name_len)
        if not name:
            raise ProtocolError("pool name must be non-empty")
        return cls(name, size, bool(flags & 1))


@dataclass
class ClosePool:
    opcode = OP_CLOSE_POOL
    pool: int

    def encode_body(self) -> bytes:
        return struct.pack("<Q", self.pool)

    @classmethod
    def decode_body(cls, body: bytes) -> "ClosePool":
        (pool,) = _unpack("<Q", body, 0)
        return cls(pool)


@dataclass
class DeletePool:
    opcode = OP_DELETE_POOL
    name: bytes

    def encode_body(self) -> bytes:
        return struct.pack("<I", len(self.name)) + self.name

    @classmethod
    def decode_body(cls, body: bytes) -> "DeletePool":
        (name_len,) = _unpack("<I", body, 0)
        name = _take(body, 4, name_len)
        if not name:
            raise ProtocolError("pool name must be non-empty")
        return cls(name)


@dataclass
class ConfigurePool:
    opcode = OP_CONFIGURE_POOL
    pool: int
    command: bytes

    def encode_body(self) -> bytes:
        return struct.pack("<QI", self.pool, len(self.command)) + self.command

    @classmethod
    def decode_body(cls, body: bytes) -> "ConfigurePool":
        pool, cmd_len = _unpack("<QI", body, 0)
        return cls(pool, _take(body, 12, cmd_len))


@dataclass
class Put:
    opcode = OP_PUT
    pool: int
    key: bytes
    value: bytes
    no_overwrite: bool = False

    def encode_body(self) -> bytes:
        flags = 1 if self.no_overwrite else 0
        return struct.pack("<QIIQ", self.pool, flags, len(self.key),
                           len(self.value)) + self.key + self.value

    @classmethod
    def decode_body(cls, body: bytes) -> "Put":
        pool, flags, key_len, value_len = _unpack("<QIIQ", body, 0)
        key = _take(body, 24, key_len)
        value = _take(body, 24 + key_len, value_len)
        if not key:
            raise ProtocolError("key must be non-empty")
        return cls(pool, key, value, bool(flags & 1))


@dataclass
class PutDirect(Put):
    opcode = OP_PUT_DIRECT


@dataclass
class Get:
    opcode = OP_GET
    pool: int
    key: bytes

    def encode_body(self) -> bytes:
        return struct.pack("<QI", self.pool, len(self.key)) + self.key

    @classmethod
    def decode_body(cls, body: bytes) -> "Get":
        pool, key_len = _unpack("<QI", body, 0)
        key = _take(body, 12, key_len)
        if not key:
            raise ProtocolError("key must be non-empty")
        return cls(pool, key)


@dataclass
class GetDirect(Get):
    opcode = OP_GET_DIRECT


@dataclass
class Erase(Get):
    opcode = OP_ERASE


@dataclass
class PutDirectOffset:
    opcode = OP_PUT_DIRECT_OFFSET
    pool: int
    key: bytes
    offset: int
    data: bytes

    def encode_body(self) -> bytes:
        return struct.pack("<QQIQ", self.pool, self.offset, len(self.key),
                           len(self.data)) + self.key + self.data

    @classmethod
    def decode_body(cls, body: bytes) -> "PutDirectOffset":
        pool, offset, key_len, data_len = _unpack("<QQIQ", body, 0)
        key = _take(body, 28, key_len)
        data = _take(body, 28 + key_len, data_len)
        if not key:
            raise ProtocolError("key must be non-empty")
        return cls(pool, key, offset, data)


@dataclass
class GetDirectOffset:
    opcode = OP_GET_DIRECT_OFFSET
    pool: int
    key: bytes
    offset: int
    length: int

    def encode_body(self) -> bytes:
        return struct.pack("<QQQI", self.pool, self.offset, self.length,
                           len(self.key)) + self.key

    @classmethod
    def decode_body(cls, body: bytes) -> "GetDirectOffset":
        pool, offset, length, key_len = _unpack("<QQQI", body, 0)
        key = _take(body, 28, key_len)
        if not key:
            raise ProtocolError("key must be non-empty")
        return cls(pool, key, offset, length)


@dataclass
class InvokeAdo:
    opcode = OP_INVOKE_ADO
    pool: int
    key: bytes
    request: bytes
    flags: int = 0
    value_size: int = 0

    def encode_body(self) -> bytes:
        return struct.pack("<QIQII", self.pool, self.flags, self.value_size,
                           len(self.key), len(self.request)) \
            + self.key + self.request

    @classmethod
    def decode_body(cls, body: bytes) -> "InvokeAdo":
        pool, flags, value_size, key_len, req_len = _unpack("<QIQII", body, 0)
        key = _take(body, 28, key_len)
        request = _take(body, 28 + key_len, req_len)
        if not key:
            raise ProtocolError("key must be non-empty")
        return cls(pool, key, request, flags, value_size)


@dataclass
class InvokePutAdo:
    opcode = OP_INVOKE_PUT_ADO
    pool: int
    key: bytes
    request: bytes
    value: bytes
    root_len: int = 0
    flags: int = 0

    def encode_body(self) -> bytes:
        return struct.pack("<QIQIIQ", self.pool, self.flags, self.root_len,
                           len(self.key), len(self.request), len(self.value)) \
            + self.key + self.request + self.value

    @classmethod
    def decode_body(cls, body: bytes) -> "InvokePutAdo":
        pool, flags, root_len, key_len, req_len, value_len = _unpack(
            "<QIQIIQ", body, 0)
        key = _take(body, 36, key_len)
        request = _take(body, 36 + key_len, req_len)
        value = _take(body, 36 + key_len + req_len, value_len)
        if not key:
            raise ProtocolError("key must be non-empty")
        return cls(pool, key, request, value, root_len, flags)


@dataclass
class GetAttributes:
    opcode = OP_GET_ATTRIBUTES
    pool: int
    key: bytes = b""

    def encode_body(self) -> bytes:
        return struct.pack("<QI", self.pool, len(self.key)) + self.key

    @classmethod
    def decode_body(cls, body: bytes) -> "GetAttributes":
        pool, key_len = _unpack("<QI", body, 0)
        return cls(pool, _take(body, 12, key_len))


@dataclass
class GetStatistics:
    opcode = OP_GET_STATISTICS

    def encode_body(self) -> bytes:
        return b""

    @classmethod
    def decode_body(cls, body: bytes) -> "GetStatistics":
        return cls()


@dataclass
class Find:
    opcode = OP_FIND
    pool: int
    expression: bytes
    kind: int
    position: bytes = b""

    def encode_body(self) -> bytes:
        return struct.pack("<QIII", self.pool, self.kind, len(self.position),
                           len(self.expression)) + self.position + self.expression

    @classmethod
    def decode_body(cls, body: bytes) -> "Find":
        pool, kind, pos_len, expr_len = _unpack("<QIII", body, 0)
        position = _take(body, 20, pos_len)
        expression = _take(body, 20 + pos_len, expr_len)
        return cls(pool, expression, kind, position)


REQUEST_TYPES = {
    cls.opcode: cls for cls in (
        Handshake, CreatePool, OpenPool, ClosePool, DeletePool, ConfigurePool,
        Put, Get, Erase, PutDirect, GetDirect, PutDirectOffset,
        GetDirectOffset, InvokeAdo, InvokePutAdo, GetAttributes,
        GetStatistics, Find)
}


def _unpack(fmt: str, body: bytes, offset: int):
    size = struct.calcsize(fmt)
    if len(body) < offset + size:
        raise ProtocolError("truncated message body")
    return struct.unpack_from(fmt, body, offset)


def _take(body: bytes, offset: int, length: int) -> bytes:
    if len(body) < offset + length:
        raise ProtocolError("truncated message body")
    return body[offset:offset + length]


def encode_request(msg, request_id: int) -> bytes:
    return pack_frame(msg.opcode, request_id, msg.encode_body())


def decode_request(frame: Frame):
    cls = REQUEST_TYPES.get(frame.opcode)
    if cls is None:
        raise ProtocolError(f"unknown opcode {frame.opcode}")
    msg = cls.decode_body(frame.payload)
    return msg


# -- responses ----------------------------------------------------------------

@dataclass
class Response:
    status: int
    request_id: int = 0
    pool: int = 0
    value: bytes = b""
    buffers: list = field(default_factory=list)
    items: list = field(default_factory=list)   # (name bytes, value int)
    key: bytes = b""
    position: bytes = b""
    version: int = 0


def encode_response(request_id: int, req_opcode: int, resp: Response) -> bytes:
    """All frames of a response, concatenated."""
    head = struct.pack("<I4x", int(resp.status))
    if resp.status != Status.S_OK:
        return pack_frame(OP_RESPONSE, request_id, head)
    if req_opcode == OP_HANDSHAKE:
        body = head + struct.pack("<I", resp.version)
    elif req_opcode in (OP_CREATE_POOL, OP_OPEN_POOL):
        body = head + struct.pack("<Q", resp.pool)
    elif req_opcode == OP_GET:
        body = head + struct.pack("<Q", len(resp.value)) + resp.value
    elif req_opcode == OP_GET_DIRECT:
        first = head + struct.pack("<Q", len(resp.value))
        chunks = [resp.value[i:i + CHUNK]
                  for i in range(0, len(resp.value), CHUNK)]
        frames = []
        flags = FLAG_CONT if chunks else 0
        frames.append(pack_frame(OP_RESPONSE, request_id, first, flags))
        for i, chunk in enumerate(chunks):
            flags = FLAG_CONT if i + 1 < len(chunks) else 0
            frames.append(pack_frame(OP_RESPONSE, request_id, chunk, flags))
        return b"".join(frames)
    elif req_opcode == OP_GET_DIRECT_OFFSET:
        body = head + struct.pack("<Q", len(resp.value)) + resp.value
    elif req_opcode in (OP_INVOKE_ADO, OP_INVOKE_PUT_ADO):
        parts = [head, struct.pack("<I", len(resp.buffers))]
        for buf in resp.buffers:
            parts.append(struct.pack("<I", len(buf)))
            parts.append(buf)
        body = b"".join(parts)
    elif req_opcode in (OP_GET_ATTRIBUTES, OP_GET_STATISTICS):
        parts = [head, struct.pack("<I", len(resp.items))]
        for name, value in resp.items:
            parts.append(struct.pack("<I", len(name)))
            parts.append(name)
            parts.append(struct.pack("<q", value))
        body = b"".join(parts)
    elif req_opcode == OP_FIND:
        body = head + struct.pack("<II", len(resp.position), len(resp.key)) \
            + resp.position + resp.key
    else:
        body = head
    return pack_frame(OP_RESPONSE, request_id, body)


def decode_response(frames: list[Frame], req_opcode: int) -> Response:
    """Decode the frame(s) of one response; `frames` must be complete."""
    first = frames[0]
    if first.opcode != OP_RESPONSE:
        raise ProtocolError(f"expected response, got opcode {first.opcode}")
    (status,) = _unpack("<I", first.payload, 0)
    body = first.payload[8:]
    resp = Response(status=Status(status), request_id=first.request_id)
    if status != Status.S_OK:
        return resp
    if req_opcode == OP_HANDSHAKE:
        (resp.version,) = _unpack("<I", body, 0)
    elif req_opcode in (OP_CREATE_POOL, OP_OPEN_POOL):
        (resp.pool,) = _unpack("<Q", body, 0)
    elif req_opcode == OP_GET:
        (length,) = _unpack("<Q", body, 0)
        resp.value = _take(body, 8, length)
    elif req_opcode == OP_GET_DIRECT:
        (length,) = _unpack("<Q", body, 0)
        value = b"".join(f.payload for f in frames[1:])
        if len(value) != length:
            raise ProtocolError("chunked value length mismatch")
        resp.value = value
    elif req_opcode == OP_GET_DIRECT_OFFSET:
        (length,) = _unpack("<Q", body, 0)
        resp.value = _take(body, 8, length)
    elif req_opcode in (OP_INVOKE_ADO, OP_INVOKE_PUT_ADO):
        (count,) = _unpack("<I", body, 0)
        pos = 4
        for _ in range(count):
            (length,) = _unpack("<I", body, pos)
            resp.buffers.append(_take(body, pos + 4, length))
            pos += 4 + length
    elif req_opcode in (OP_GET_ATTRIBUTES, OP_GET_STATISTICS):
        (count,) = _unpack("<I", body, 0)
        pos = 4
        for _ in range(count):
            (name_len,) = _unpack("<I", body, pos)
            name = _take(body, pos + 4, name_len)
            pos += 4 + name_len
            (value,) = _unpack("<q", body, pos)
            pos += 8
            resp.items.append((name, value))
    elif req_opcode == OP_FIND:
        pos_len, key_len = _unpack("<II", body, 0)
        resp.position = _take(body, 8, pos_len)
        resp.key = _take(body, 8 + pos_len, key_len)
    return resp


class FrameReader:
    """Incremental frame assembly from a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while True:
            if len(self._buf) < HEADER_SIZE:
                break
            opcode, flags, request_id, length = unpack_header(
                bytes(self._buf[:HEADER_SIZE]))
            if len(self._buf) < HEADER_SIZE + length:
                break
            payload = bytes(self._buf[HEADER_SIZE:HEADER_SIZE + length])
            del self._buf[:HEADER_SIZE + length]
            frames.append(Frame(opcode, flags, request_id, payload))
        return frames
