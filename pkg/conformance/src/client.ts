/**
 * Minimal conformance client: handshake, pool management, put/get/erase,
 * find, invoke_ado over one TCP connection. Synchronous call/response
 * only; the direct and async API families are out of scope here.
 */

import * as net from "node:net";
import {
    ADO_FLAG_DETACHED,
    FrameReader,
    Frame,
    FLAG_CONT,
    MatchKind,
    Opcode,
    Response,
    Status,
    decodeResponse,
    encodeConfigurePool,
    encodeClosePool,
    encodeCreatePool,
    encodeDeletePool,
    encodeErase,
    encodeFind,
    encodeGet,
    encodeGetAttributes,
    encodeGetStatistics,
    encodeHandshake,
    encodeInvokeAdo,
    encodeInvokePutAdo,
    encodeOpenPool,
    encodePut,
    packFrame,
} from "./codec.js";

export class StatusError extends Error {
    constructor(
        public readonly status: Status,
        context: string,
    ) {
        super(`${context}: ${Status[status] ?? status}`);
    }
}

function check(resp: Response, context: string): Response {
    if (resp.status !== Status.S_OK) throw new StatusError(resp.status, context);
    return resp;
}

export class ConformanceClient {
    private reader = new FrameReader();
    private pendingFrames: Frame[] = [];
    private nextId = 1n;
    private waiter: (() => void) | null = null;
    private closed = false;

    private constructor(private sock: net.Socket) {
        sock.on("data", (chunk: Buffer) => {
            this.pendingFrames.push(...this.reader.feed(chunk));
            this.waiter?.();
        });
        sock.on("close", () => {
            this.closed = true;
            this.waiter?.();
        });
        sock.on("error", () => {
            this.closed = true;
            this.waiter?.();
        });
    }

    static async connect(host: string, port: number, version?: number): Promise<ConformanceClient> {
        const sock = await new Promise<net.Socket>((resolve, reject) => {
            const s = net.createConnection({ host, port, noDelay: true });
            s.once("connect", () => resolve(s));
            s.once("error", reject);
        });
        const client = new ConformanceClient(sock);
        const resp = await client.call(Opcode.HANDSHAKE, encodeHandshake(version));
        check(resp, "handshake");
        return client;
    }

    close(): void {
        this.closed = true;
        this.sock.destroy();
    }

    get isClosed(): boolean {
        return this.closed;
    }

    /** Send one request frame and await its (possibly chunked) response. */
    async call(opcode: Opcode, body: Buffer): Promise<Response> {
        const rid = this.nextId++;
        this.sock.write(packFrame(opcode, rid, body));
        const frames: Frame[] = [];
        for (;;) {
            while (this.pendingFrames.length) {
                const frame = this.pendingFrames.shift()!;
                if (frame.requestId !== rid) continue; // not ours; drop
                frames.push(frame);
                if (!(frame.flags & FLAG_CONT)) {
                    return decodeResponse(frames, opcode);
                }
            }
            if (this.closed) throw new Error("connection closed by server");
            await new Promise<void>((resolve) => {
                this.waiter = resolve;
            });
            this.waiter = null;
        }
    }

    /** Await the server dropping the connection (protocol-error checks). */
    async waitClosed(timeoutMs = 5000): Promise<boolean> {
        const deadline = Date.now() + timeoutMs;
        while (!this.closed && Date.now() < deadline) {
            await new Promise((resolve) => setTimeout(resolve, 20));
        }
        return this.closed;
    }

    sendRaw(bytes: Buffer): void {
        this.sock.write(bytes);
    }

    async createPool(name: Buffer, size: number | bigint): Promise<bigint> {
        const resp = check(
            await this.call(Opcode.CREATE_POOL, encodeCreatePool(name, size)),
            "create_pool",
        );
        return resp.pool!;
    }

    async openPool(name: Buffer, size: number | bigint = 0, createOnDemand = false): Promise<bigint> {
        const resp = check(
            await this.call(Opcode.OPEN_POOL, encodeOpenPool(name, size, createOnDemand)),
            "open_pool",
        );
        return resp.pool!;
    }

    async closePool(pool: bigint): Promise<void> {
        check(await this.call(Opcode.CLOSE_POOL, encodeClosePool(pool)), "close_pool");
    }

    async deletePool(name: Buffer): Promise<void> {
        check(await this.call(Opcode.DELETE_POOL, encodeDeletePool(name)), "delete_pool");
    }

    async configurePool(pool: bigint, command: Buffer): Promise<void> {
        check(
            await this.call(Opcode.CONFIGURE_POOL, encodeConfigurePool(pool, command)),
            "configure_pool",
        );
    }

    async put(pool: bigint, key: Buffer, value: Buffer, noOverwrite = false): Promise<void> {
        check(await this.call(Opcode.PUT, encodePut(pool, key, value, noOverwrite)), "put");
    }

    async get(pool: bigint, key: Buffer): Promise<Buffer> {
        const resp = check(await this.call(Opcode.GET, encodeGet(pool, key)), "get");
        return resp.value!;
    }

    async erase(pool: bigint, key: Buffer): Promise<void> {
        check(await this.call(Opcode.ERASE, encodeErase(pool, key)), "erase");
    }

    async find(
        pool: bigint,
        expression: Buffer,
        kind: MatchKind,
        position: Buffer = Buffer.alloc(0),
    ): Promise<{ key: Buffer; position: Buffer }> {
        const resp = check(
            await this.call(Opcode.FIND, encodeFind(pool, expression, kind, position)),
            "find",
        );
        return { key: resp.key!, position: resp.position! };
    }

    async invokeAdo(
        pool: bigint,
        key: Buffer,
        request: Buffer,
        flags = 0,
        valueSize: number | bigint = 0,
    ): Promise<Buffer[]> {
        const resp = check(
            await this.call(Opcode.INVOKE_ADO, encodeInvokeAdo(pool, key, request, flags, valueSize)),
            "invoke_ado",
        );
        return resp.buffers!;
    }

    async invokePutAdo(
        pool: bigint,
        key: Buffer,
        request: Buffer,
        value: Buffer,
        rootLen: number | bigint = 0,
        flags = ADO_FLAG_DETACHED,
    ): Promise<Buffer[]> {
        const resp = check(
            await this.call(
                Opcode.INVOKE_PUT_ADO,
                encodeInvokePutAdo(pool, key, request, value, rootLen, flags),
            ),
            "invoke_put_ado",
        );
        return resp.buffers!;
    }

    async getStatistics(): Promise<Map<string, bigint>> {
        const resp = check(
            await this.call(Opcode.GET_STATISTICS, encodeGetStatistics()),
            "get_statistics",
        );
        return new Map(resp.items!.map(([name, value]) => [name.toString(), value]));
    }

    async getAttributes(pool: bigint, key: Buffer = Buffer.alloc(0)): Promise<Map<string, bigint>> {
        const resp = check(
            await this.call(Opcode.GET_ATTRIBUTES, encodeGetAttributes(pool, key)),
            "get_attributes",
        );
        return new Map(resp.items!.map(([name, value]) => [name.toString(), value]));
    }
}
