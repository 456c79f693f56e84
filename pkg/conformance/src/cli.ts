#!/usr/bin/env node
/**
 * pyconform --addr host:port --suite conformance.json
 *
 * Runs the live conformance suite against a running server plus the
 * golden-frame byte-identity corpus; prints one line per case and exits
 * non-zero on any failure.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import * as url from "node:url";
import { ConformanceClient, StatusError } from "./client.js";
import {
    ADO_FLAG_DETACHED,
    MatchKind,
    Opcode,
    Status,
    decodeResponse,
    encodeHandshake,
    encodeResponse,
    packFrame,
    parseHeader,
    HEADER_SIZE,
    FrameReader,
} from "./codec.js";

interface GoldenCase {
    name: string;
    kind: "request" | "response";
    opcode: number;
    request_id: number;
    hex: string;
}

interface SuiteSpec {
    addr?: string;
    pool?: string;
    golden?: string;
    skip_live?: boolean;
}

type CaseFn = () => Promise<void>;

const results: Array<[string, string]> = [];

async function runCase(name: string, fn: CaseFn): Promise<void> {
    try {
        await fn();
        results.push([name, "PASS"]);
        console.log(`PASS ${name}`);
    } catch (err) {
        results.push([name, `FAIL ${err}`]);
        console.log(`FAIL ${name}: ${err}`);
    }
}

function goldenRoundTrip(cases: GoldenCase[]): void {
    for (const c of cases) {
        const raw = Buffer.from(c.hex, "hex");
        const reader = new FrameReader();
        const frames = reader.feed(raw);
        if (!frames.length) throw new Error(`${c.name}: no frames parsed`);
        if (c.kind === "response") {
            const resp = decodeResponse(frames, c.opcode);
            const again = encodeResponse(BigInt(c.request_id), c.opcode, resp);
            if (!again.equals(raw)) {
                throw new Error(`${c.name}: response re-encode differs`);
            }
        } else {
            const head = parseHeader(raw);
            if (head.opcode !== c.opcode) {
                throw new Error(`${c.name}: opcode mismatch`);
            }
        }
    }
}

async function liveSuite(addr: string, poolName: string): Promise<void> {
    const [host, portText] = addr.split(":");
    const port = parseInt(portText, 10);
    const client = await ConformanceClient.connect(host, port);
    const name = Buffer.from(poolName);
    const pool = await client.openPool(name, 32 * 1024 * 1024, true);

    await runCase("put-get-roundtrip", async () => {
        const value = Buffer.alloc(16);
        for (let i = 0; i < 16; i++) value[i] = i * 3;
        await client.put(pool, Buffer.from("conf-a"), value);
        const back = await client.get(pool, Buffer.from("conf-a"));
        if (!back.equals(value)) throw new Error("value mismatch");
    });

    await runCase("no-overwrite-flag", async () => {
        await client.put(pool, Buffer.from("conf-dup"), Buffer.from("x"));
        try {
            await client.put(pool, Buffer.from("conf-dup"), Buffer.from("y"), true);
            throw new Error("expected E_ALREADY_EXISTS");
        } catch (err) {
            if (!(err instanceof StatusError) || err.status !== Status.E_ALREADY_EXISTS) throw err;
        }
    });

    await runCase("erase-then-missing", async () => {
        await client.put(pool, Buffer.from("conf-gone"), Buffer.from("z"));
        await client.erase(pool, Buffer.from("conf-gone"));
        try {
            await client.get(pool, Buffer.from("conf-gone"));
            throw new Error("expected E_KEY_NOT_FOUND");
        } catch (err) {
            if (!(err instanceof StatusError) || err.status !== Status.E_KEY_NOT_FOUND) throw err;
        }
    });

    await runCase("find-prefix-scan", async () => {
        await client.configurePool(pool, Buffer.from("add-index"));
        await client.put(pool, Buffer.from("scan/1"), Buffer.from("1"));
        await client.put(pool, Buffer.from("scan/2"), Buffer.from("2"));
        const seen: string[] = [];
        let position: Buffer = Buffer.alloc(0);
        for (;;) {
            try {
                const hit = await client.find(pool, Buffer.from("scan/"), MatchKind.PREFIX, position);
                seen.push(hit.key.toString());
                position = hit.position;
            } catch (err) {
                if (err instanceof StatusError && err.status === Status.E_NO_MATCH) break;
                throw err;
            }
        }
        if (seen.join(",") !== "scan/1,scan/2") {
            throw new Error(`scan order wrong: ${seen}`);
        }
    });

    await runCase("invoke-ado-echo", async () => {
        const payload = Buffer.from("ping-from-conformance");
        const buffers = await client.invokeAdo(pool, Buffer.from("conf-ado"), payload, 0, 64);
        if (buffers.length !== 1 || !buffers[0].equals(payload)) {
            throw new Error("echo mismatch");
        }
    });

    await runCase("statistics-present", async () => {
        const stats = await client.getStatistics();
        if (!stats.has("op.put.count")) throw new Error("missing counters");
    });

    client.close();

    await runCase("version-mismatch-rejected", async () => {
        try {
            await ConformanceClient.connect(host, port, 99);
            throw new Error("expected E_VERSION");
        } catch (err) {
            if (!(err instanceof StatusError) || err.status !== Status.E_VERSION) throw err;
        }
    });

    await runCase("corrupt-magic-closes-session", async () => {
        const probe = await ConformanceClient.connect(host, port);
        const bad = packFrame(Opcode.GET, 9n, encodeHandshake());
        bad.write("XXXX", 0, "ascii");
        probe.sendRaw(bad);
        if (!(await probe.waitClosed())) throw new Error("server kept the session");
        if (probe.isClosed !== true) throw new Error("client state wrong");
    });
}

export async function main(argv = process.argv.slice(2)): Promise<number> {
    let addr = "127.0.0.1:11911";
    let suitePath = "";
    for (let i = 0; i < argv.length; i++) {
        if (argv[i] === "--addr") addr = argv[++i];
        else if (argv[i] === "--suite") suitePath = argv[++i];
    }
    let spec: SuiteSpec = {};
    if (suitePath) {
        spec = JSON.parse(fs.readFileSync(suitePath, "utf-8")) as SuiteSpec;
        if (spec.addr && addr === "127.0.0.1:11911") addr = spec.addr;
    }
    const here = path.dirname(url.fileURLToPath(import.meta.url));
    const goldenPath = spec.golden
        ? path.resolve(path.dirname(suitePath || "."), spec.golden)
        : path.resolve(here, "..", "golden_frames.json");

    await runCase("golden-frame-corpus", async () => {
        const cases = JSON.parse(fs.readFileSync(goldenPath, "utf-8")) as GoldenCase[];
        if (cases.length < 25) throw new Error("corpus too small");
        goldenRoundTrip(cases);
    });

    if (!spec.skip_live) {
        await liveSuite(addr, spec.pool ?? "pyconform");
    }

    const failed = results.filter(([, r]) => r !== "PASS");
    console.log(`\n${results.length - failed.length}/${results.length} cases passed`);
    return failed.length ? 1 : 0;
}

const isMain =
    process.argv[1] && path.resolve(process.argv[1]) === url.fileURLToPath(import.meta.url);
if (isMain) {
    main().then(
        (code) => process.exit(code),
        (err) => {
            console.error(err);
            process.exit(2);
        },
    );
}
