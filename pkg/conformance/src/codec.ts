/**
 * Wire codec implemented from PROTOCOL.md.
 *
 * Every frame: 32-byte little-endian header + payload. Mutation
 * acknowledgments are durability receipts (persist-on-completion).
 */

export const MAGIC = "MCA2";
export const PROTO_VERSION = 1;
export const HEADER_SIZE = 32;
export const FLAG_CONT = 0x1;
export const ADO_FLAG_DETACHED = 0x1;

export enum Opcode {
    HANDSHAKE = 1,
    CREATE_POOL = 2,
    OPEN_POOL = 3,
    CLOSE_POOL = 4,
    DELETE_POOL = 5,
    CONFIGURE_POOL = 6,
    PUT = 7,
    GET = 8,
    ERASE = 9,
    PUT_DIRECT = 10,
    GET_DIRECT = 11,
    PUT_DIRECT_OFFSET = 12,
    GET_DIRECT_OFFSET = 13,
    INVOKE_ADO = 14,
    INVOKE_PUT_ADO = 15,
    GET_ATTRIBUTES = 16,
    GET_STATISTICS = 17,
    FIND = 18,
    RESPONSE = 32,
}

export enum Status {
    S_OK = 0,
    E_KEY_NOT_FOUND = 1,
    E_ALREADY_EXISTS = 2,
    E_NO_SPACE = 3,
    E_TOO_LARGE = 4,
    E_BAD_POOL = 5,
    E_NO_INDEX = 6,
    E_NO_MATCH = 7,
    E_ADO_FAULT = 8,
    E_PROTOCOL = 9,
    E_RANGE = 10,
    E_BUSY = 11,
    E_BAD_REGEX = 12,
    E_VERSION = 13,
}

export enum MatchKind {
    EXACT = 0,
    PREFIX = 1,
    REGEX = 2,
}

export interface Frame {
    opcode: number;
    flags: number;
    requestId: bigint;
    payload: Buffer;
}

export class ProtocolViolation extends Error {}

class Writer {
    private parts: Buffer[] = [];

    u32(v: number): this {
        const b = Buffer.alloc(4);
        b.writeUInt32LE(v >>> 0);
        this.parts.push(b);
        return this;
    }

    u64(v: bigint | number): this {
        const b = Buffer.alloc(8);
        b.writeBigUInt64LE(BigInt(v));
        this.parts.push(b);
        return this;
    }

    bytes(v: Buffer | Uint8Array): this {
        this.parts.push(Buffer.from(v));
        return this;
    }

    done(): Buffer {
        return Buffer.concat(this.parts);
    }
}

export function packFrame(
    opcode: number,
    requestId: bigint | number,
    payload: Buffer,
    flags = 0,
): Buffer {
    const header = Buffer.alloc(HEADER_SIZE);
    header.write(MAGIC, 0, "ascii");
    header.writeUInt8(PROTO_VERSION, 4);
    header.writeUInt8(opcode, 5);
    header.writeUInt16LE(flags, 6);
    header.writeBigUInt64LE(BigInt(requestId), 8);
    header.writeUInt32LE(0, 16); // auth, reserved
    header.writeBigUInt64LE(BigInt(payload.length), 24);
    return Buffer.concat([header, payload]);
}

export function parseHeader(buf: Buffer): {
    opcode: number;
    flags: number;
    requestId: bigint;
    payloadLen: number;
} {
    if (buf.toString("ascii", 0, 4) !== MAGIC) {
        throw new ProtocolViolation(`bad magic ${buf.subarray(0, 4).toString("hex")}`);
    }
    if (buf.readUInt8(4) !== PROTO_VERSION) {
        throw new ProtocolViolation(`unsupported version ${buf.readUInt8(4)}`);
    }
    return {
        opcode: buf.readUInt8(5),
        flags: buf.readUInt16LE(6),
        requestId: buf.readBigUInt64LE(8),
        payloadLen: Number(buf.readBigUInt64LE(24)),
    };
}

/** Incremental frame assembly from stream chunks. */
export class FrameReader {
    private buf: Buffer = Buffer.alloc(0);

    feed(chunk: Buffer): Frame[] {
        this.buf = this.buf.length ? Buffer.concat([this.buf, chunk]) : chunk;
        const frames: Frame[] = [];
        for (;;) {
            if (this.buf.length < HEADER_SIZE) break;
            const head = parseHeader(this.buf);
            if (this.buf.length < HEADER_SIZE + head.payloadLen) break;
            frames.push({
                opcode: head.opcode,
                flags: head.flags,
                requestId: head.requestId,
                payload: this.buf.subarray(HEADER_SIZE, HEADER_SIZE + head.payloadLen),
            });
            this.buf = this.buf.subarray(HEADER_SIZE + head.payloadLen);
        }
        return frames;
    }
}

// -- request encoders ---------------------------------------------------------

export function encodeHandshake(version = PROTO_VERSION): Buffer {
    return new Writer().u32(version).done();
}

export function encodeCreatePool(name: Buffer, size: bigint | number, flags = 0): Buffer {
    return new Writer().u64(size).u32(flags).u32(name.length).bytes(name).done();
}

export function encodeOpenPool(
    name: Buffer,
    size: bigint | number = 0,
    createOnDemand = false,
): Buffer {
    return new Writer()
        .u64(size)
        .u32(createOnDemand ? 1 : 0)
        .u32(name.length)
        .bytes(name)
        .done();
}

export function encodeClosePool(pool: bigint): Buffer {
    return new Writer().u64(pool).done();
}

export function encodeDeletePool(name: Buffer): Buffer {
    return new Writer().u32(name.length).bytes(name).done();
}

export function encodeConfigurePool(pool: bigint, command: Buffer): Buffer {
    return new Writer().u64(pool).u32(command.length).bytes(command).done();
}

export function encodePut(
    pool: bigint,
    key: Buffer,
    value: Buffer,
    noOverwrite = false,
): Buffer {
    return new Writer()
        .u64(pool)
        .u32(noOverwrite ? 1 : 0)
        .u32(key.length)
        .u64(value.length)
        .bytes(key)
        .bytes(value)
        .done();
}

export function encodeGet(pool: bigint, key: Buffer): Buffer {
    return new Writer().u64(pool).u32(key.length).bytes(key).done();
}

export const encodeErase = encodeGet;

export function encodePutDirectOffset(
    pool: bigint,
    key: Buffer,
    offset: bigint | number,
    data: Buffer,
): Buffer {
    return new Writer()
        .u64(pool)
        .u64(offset)
        .u32(key.length)
        .u64(data.length)
        .bytes(key)
        .bytes(data)
        .done();
}

export function encodeGetDirectOffset(
    pool: bigint,
    key: Buffer,
    offset: bigint | number,
    length: bigint | number,
): Buffer {
    return new Writer()
        .u64(pool)
        .u64(offset)
        .u64(length)
        .u32(key.length)
        .bytes(key)
        .done();
}

export function encodeInvokeAdo(
    pool: bigint,
    key: Buffer,
    request: Buffer,
    flags = 0,
    valueSize: bigint | number = 0,
): Buffer {
    return new Writer()
        .u64(pool)
        .u32(flags)
        .u64(valueSize)
        .u32(key.length)
        .u32(request.length)
        .bytes(key)
        .bytes(request)
        .done();
}

export function encodeInvokePutAdo(
    pool: bigint,
    key: Buffer,
    request: Buffer,
    value: Buffer,
    rootLen: bigint | number = 0,
    flags = 0,
): Buffer {
    return new Writer()
        .u64(pool)
        .u32(flags)
        .u64(rootLen)
        .u32(key.length)
        .u32(request.length)
        .u64(value.length)
        .bytes(key)
        .bytes(request)
        .bytes(value)
        .done();
}

export function encodeGetAttributes(pool: bigint, key: Buffer = Buffer.alloc(0)): Buffer {
    return new Writer().u64(pool).u32(key.length).bytes(key).done();
}

export function encodeGetStatistics(): Buffer {
    return Buffer.alloc(0);
}

export function encodeFind(
    pool: bigint,
    expression: Buffer,
    kind: MatchKind,
    position: Buffer = Buffer.alloc(0),
): Buffer {
    return new Writer()
        .u64(pool)
        .u32(kind)
        .u32(position.length)
        .u32(expression.length)
        .bytes(position)
        .bytes(expression)
        .done();
}

// -- response decoding -------------------------------------------------------------

export interface Response {
    status: Status;
    requestId: bigint;
    pool?: bigint;
    value?: Buffer;
    buffers?: Buffer[];
    items?: Array<[Buffer, bigint]>;
    key?: Buffer;
    position?: Buffer;
    version?: number;
}

export function decodeResponse(frames: Frame[], reqOpcode: number): Response {
    const first = frames[0];
    if (first.opcode !== Opcode.RESPONSE) {
        throw new ProtocolViolation(`expected RESPONSE, got opcode ${first.opcode}`);
    }
    const status = first.payload.readUInt32LE(0) as Status;
    const body = first.payload.subarray(8);
    const resp: Response = { status, requestId: first.requestId };
    if (status !== Status.S_OK) return resp;
    switch (reqOpcode) {
        case Opcode.HANDSHAKE:
            resp.version = body.readUInt32LE(0);
            break;
        case Opcode.CREATE_POOL:
        case Opcode.OPEN_POOL:
            resp.pool = body.readBigUInt64LE(0);
            break;
        case Opcode.GET:
        case Opcode.GET_DIRECT_OFFSET: {
            const len = Number(body.readBigUInt64LE(0));
            resp.value = body.subarray(8, 8 + len);
            break;
        }
        case Opcode.GET_DIRECT: {
            const total = Number(body.readBigUInt64LE(0));
            const value = Buffer.concat(frames.slice(1).map((f) => f.payload));
            if (value.length !== total) {
                throw new ProtocolViolation("chunked value length mismatch");
            }
            resp.value = value;
            break;
        }
        case Opcode.INVOKE_ADO:
        case Opcode.INVOKE_PUT_ADO: {
            const count = body.readUInt32LE(0);
            let pos = 4;
            resp.buffers = [];
            for (let i = 0; i < count; i++) {
                const len = body.readUInt32LE(pos);
                resp.buffers.push(body.subarray(pos + 4, pos + 4 + len));
                pos += 4 + len;
            }
            break;
        }
        case Opcode.GET_ATTRIBUTES:
        case Opcode.GET_STATISTICS: {
            const count = body.readUInt32LE(0);
            let pos = 4;
            resp.items = [];
            for (let i = 0; i < count; i++) {
                const nameLen = body.readUInt32LE(pos);
                const name = body.subarray(pos + 4, pos + 4 + nameLen);
                pos += 4 + nameLen;
                const value = body.readBigInt64LE(pos);
                pos += 8;
                resp.items.push([name, BigInt(value)]);
            }
            break;
        }
        case Opcode.FIND: {
            const posLen = body.readUInt32LE(0);
            const keyLen = body.readUInt32LE(4);
            resp.position = body.subarray(8, 8 + posLen);
            resp.key = body.subarray(8 + posLen, 8 + posLen + keyLen);
            break;
        }
        default:
            break;
    }
    return resp;
}

/** Re-encode a decoded response (golden-corpus identity checks). */
export function encodeResponse(requestId: bigint, reqOpcode: number, resp: Response): Buffer {
    const head = new Writer().u32(resp.status).u32(0);
    if (resp.status !== Status.S_OK) {
        return packFrame(Opcode.RESPONSE, requestId, head.done());
    }
    switch (reqOpcode) {
        case Opcode.HANDSHAKE:
            head.u32(resp.version ?? PROTO_VERSION);
            break;
        case Opcode.CREATE_POOL:
        case Opcode.OPEN_POOL:
            head.u64(resp.pool ?? 0n);
            break;
        case Opcode.GET:
        case Opcode.GET_DIRECT_OFFSET:
            head.u64(resp.value!.length).bytes(resp.value!);
            break;
        case Opcode.GET_DIRECT: {
            const value = resp.value!;
            const CHUNK = 1 << 20;
            head.u64(value.length);
            const chunks: Buffer[] = [];
            for (let i = 0; i < value.length; i += CHUNK) {
                chunks.push(value.subarray(i, i + CHUNK));
            }
            const frames = [
                packFrame(Opcode.RESPONSE, requestId, head.done(), chunks.length ? FLAG_CONT : 0),
            ];
            chunks.forEach((chunk, i) => {
                frames.push(
                    packFrame(
                        Opcode.RESPONSE,
                        requestId,
                        chunk,
                        i + 1 < chunks.length ? FLAG_CONT : 0,
                    ),
                );
            });
            return Buffer.concat(frames);
        }
        case Opcode.INVOKE_ADO:
        case Opcode.INVOKE_PUT_ADO:
            head.u32(resp.buffers!.length);
            for (const buf of resp.buffers!) head.u32(buf.length).bytes(buf);
            break;
        case Opcode.GET_ATTRIBUTES:
        case Opcode.GET_STATISTICS: {
            head.u32(resp.items!.length);
            for (const [name, value] of resp.items!) {
                head.u32(name.length).bytes(name);
                const b = Buffer.alloc(8);
                b.writeBigInt64LE(value);
                head.bytes(b);
            }
            break;
        }
        case Opcode.FIND:
            head.u32(resp.position!.length)
                .u32(resp.key!.length)
                .bytes(resp.position!)
                .bytes(resp.key!);
            break;
        default:
            break;
    }
    return packFrame(Opcode.RESPONSE, requestId, head.done());
}
