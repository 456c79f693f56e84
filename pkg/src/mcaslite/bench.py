"""Benchmark harness.

One OS process per simulated client; a coordinator distributes clients
across shard endpoints, releases them together through a TCP control
socket barrier, and aggregates results.  Each client drives its own pool
with keys drawn from a seeded generator, so a given seed reproduces the
exact key sequence.

Latency is sampled per operation.  The histogram uses 40 bins: 39 linear
bins over [observed min, p99.99] plus an overflow bin, and bin counts
always sum to the sample count.  Reports are emitted as JSON, optionally
CSV (bin rows) and a log-scale PNG plot.

Modes: a plain run (`--mix read|write|ado`), a shard-scaling sweep
(`--sweep`) with a degradation-from-linear column computed against the
projected single-shard rate, and a fairness run (`--fairness`) reporting
each client's share of one shard.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing as mp
import platform
import random
import socket
import struct
import sys
import time
from array import array
from dataclasses import dataclass, field

from .client import Session
from .errors import ConnectError

BINS = 40


@dataclass
class WorkloadSpec:
    mix: str = "write"              # read | write | ado
    key_len: int = 8
    value_len: int = 16
    clients: int = 5
    shards: int = 1
    ops: int = 10000
    duration: float = 0.0           # seconds; overrides ops when > 0
    target: str = "keyset:1000"     # same-key | keyset:N
    seed: int = 42
    addrs: list[str] = field(default_factory=lambda: ["127.0.0.1:11911"])
    pool_size: int = 32 << 20
    bins: int = BINS

    def key_count(self) -> int:
        if self.target == "same-key":
            return 1
        if self.target.startswith("keyset:"):
            return max(1, int(self.target.split(":", 1)[1]))
        raise ValueError(f"unknown target {self.target!r}")


def _client_keys(spec: WorkloadSpec, client_id: int) -> list[bytes]:
    rng = random.Random((spec.seed << 16) ^ client_id)
    count = spec.key_count()
    keys = []
    seen = set()
    while len(keys) < count:
        key = bytes(rng.randrange(33, 127) for _ in range(spec.key_len))
        if key not in seen:
            seen.add(key)
            keys.append(key)
    return keys


def run_client(spec: WorkloadSpec, client_id: int, endpoint: str,
               control_addr: tuple) -> None:
    """Worker process: barrier in, run the mix, stream results out."""
    ctl = socket.create_connection(control_addr)
    try:
        session = Session(endpoint)
        pool_name = b"bench.%d.%d" % (spec.seed, client_id)
        pool = session.create_pool(pool_name, spec.pool_size)
        rng = random.Random((spec.seed << 20) ^ (client_id * 7919))
        keys = _client_keys(spec, client_id)
        value = bytes(client_id % 256 for _ in range(spec.value_len))
        if spec.mix == "read":
            for key in keys:
                session.put(pool, key, value)
        ctl.sendall(b"READY\n")
        if ctl.recv(3) != b"GO\n":
            raise ConnectError("no GO from coordinator")

        samples = array("q")
        errors = 0
        deadline = time.monotonic() + spec.duration if spec.duration else None
        budget = spec.ops if not spec.duration else 1 << 62
        started = time.perf_counter_ns()
        done = 0
        while done < budget:
            if deadline is not None and time.monotonic() >= deadline:
                break
            key = keys[rng.randrange(len(keys))] if len(keys) > 1 else keys[0]
            t0 = time.perf_counter_ns()
            try:
                if spec.mix == "write":
                    session.put(pool, key, value)
                elif spec.mix == "read":
                    session.get(pool, key)
                else:
                    session.invoke_ado(pool, key, b"benchreq",
                                       value_size=max(spec.value_len, 8))
            except ConnectError:
                raise
            except Exception:
                errors += 1
            samples.append(time.perf_counter_ns() - t0)
            done += 1
        elapsed = (time.perf_counter_ns() - started) / 1e9
        try:
            session.delete_pool(pool_name)
        except Exception:
            pass
        header = {
            "client": client_id,
            "endpoint": endpoint,
            "ops": done,
            "errors": errors,
            "elapsed_s": elapsed,
            "host": {"node": platform.node(),
                     "machine": platform.machine(),
                     "python": platform.python_version()},
            "samples": len(samples),
        }
        blob = json.dumps(header).encode()
        ctl.sendall(struct.pack("<I", len(blob)) + blob)
        raw = samples.tobytes()
        ctl.sendall(struct.pack("<Q", len(raw)))
        ctl.sendall(raw)
    except Exception as exc:
        blob = json.dumps({"client": client_id, "error": str(exc)}).encode()
        try:
            ctl.sendall(struct.pack("<I", len(blob)) + blob)
            ctl.sendall(struct.pack("<Q", 0))
        except OSError:
            pass
    finally:
        ctl.close()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    parts = []
    while n:
        data = sock.recv(min(n, 1 << 20))
        if not data:
            raise ConnectError("worker disconnected")
        parts.append(data)
        n -= len(data)
    return b"".join(parts)


def percentile(sorted_samples, q: float) -> int:
    if not sorted_samples:
        return 0
    idx = min(len(sorted_samples) - 1,
              max(0, int(q / 100.0 * len(sorted_samples))))
    return sorted_samples[idx]


def build_histogram(samples, bins: int = BINS) -> dict:
    """39 linear bins over [min, p99.99] plus one overflow bin."""
    n = len(samples)
    if n == 0:
        return {"bins": [], "samples": 0}
    ordered = sorted(samples)
    lo = ordered[0]
    hi = max(percentile(ordered, 99.99), lo + 1)
    linear = bins - 1
    width = max(1, (hi - lo + linear - 1) // linear)
    counts = [0] * bins
    for s in samples:
        if s >= hi:
            counts[linear] += 1
        else:
            counts[min(linear - 1, (s - lo) // width)] += 1
    rows = []
    for i in range(linear):
        rows.append({"lo": lo + i * width, "hi": lo + (i + 1) * width,
                     "count": counts[i]})
    rows.append({"lo": hi, "hi": ordered[-1] + 1, "count": counts[linear]})
    return {"bins": rows, "samples": n, "unit": "ns"}


def run_bench(spec: WorkloadSpec) -> dict:
    """Run one workload; returns the report dictionary."""
    addrs = spec.addrs[:spec.shards]
    ctl = socket.create_server(("127.0.0.1", 0))
    ctl.listen(spec.clients)
    control_addr = ctl.getsockname()
    ctx = mp.get_context("spawn" if sys.platform == "win32" else "fork")
    workers = []
    for i in range(spec.clients):
        endpoint = addrs[i % len(addrs)]
        proc = ctx.Process(target=run_client,
                           args=(spec, i, endpoint, control_addr),
                           daemon=True)
        proc.start()
        workers.append(proc)
    conns = []
    try:
        ctl.settimeout(60)
        for _ in range(spec.clients):
            conn, _ = ctl.accept()
            conns.append(conn)
        for conn in conns:
            if _recv_exact(conn, 6) != b"READY\n":
                raise ConnectError("worker failed to prepare")
        wall_start = time.perf_counter_ns()
        for conn in conns:
            conn.sendall(b"GO\n")
        clients = []
        merged = array("q")
        for conn in conns:
            conn.settimeout(3600)
            (hlen,) = struct.unpack("<I", _recv_exact(conn, 4))
            header = json.loads(_recv_exact(conn, hlen))
            (blen,) = struct.unpack("<Q", _recv_exact(conn, 8))
            raw = _recv_exact(conn, blen) if blen else b""
            samples = array("q")
            samples.frombytes(raw)
            merged.extend(samples)
            if "error" not in header:
                header["ops_per_sec"] = (header["ops"] / header["elapsed_s"]
                                         if header["elapsed_s"] else 0.0)
            clients.append(header)
        wall = (time.perf_counter_ns() - wall_start) / 1e9
    finally:
        for conn in conns:
            conn.close()
        ctl.close()
        for proc in workers:
            proc.join(timeout=10)
            if proc.is_alive():
                proc.terminate()

    ok_clients = [c for c in clients if "error" not in c]
    failed = [c for c in clients if "error" in c]
    total_ops = sum(c["ops"] for c in ok_clients)
    elapsed = max((c["elapsed_s"] for c in ok_clients), default=0.0)
    aggregate = total_ops / elapsed if elapsed else 0.0
    ordered = sorted(merged)
    report = {
        "spec": {
            "mix": spec.mix, "key_len": spec.key_len,
            "value_len": spec.value_len, "clients": spec.clients,
            "shards": spec.shards, "ops": spec.ops,
            "duration": spec.duration, "target": spec.target,
            "seed": spec.seed, "addrs": addrs,
        },
        "clients": clients,
        "partial_failure": bool(failed),
        "aggregate": {
            "ops": total_ops,
            "elapsed_s": elapsed,
            "wall_s": wall,
            "ops_per_sec": aggregate,
            "sum_client_rates": sum(c.get("ops_per_sec", 0.0)
                                    for c in ok_clients),
        },
        "latency": {
            "unit": "ns",
            "percentiles": {
                "min": ordered[0] if ordered else 0,
                "p50": percentile(ordered, 50),
                "p90": percentile(ordered, 90),
                "p99": percentile(ordered, 99),
                "p99_9": percentile(ordered, 99.9),
                "max": ordered[-1] if ordered else 0,
                "mean": (sum(ordered) // len(ordered)) if ordered else 0,
            },
            "histogram": build_histogram(merged, spec.bins),
        },
    }
    if spec.clients > 1 and total_ops:
        shares = [c["ops"] / total_ops for c in ok_clients]
        report["fairness"] = {
            "ideal_share": 1.0 / spec.clients,
            "min_share": min(shares) if shares else 0.0,
            "max_share": max(shares) if shares else 0.0,
        }
    return report


def scaling_sweep(spec: WorkloadSpec, max_shards: int) -> dict:
    """run_bench per shard count with a degradation-from-linear column."""
    rows = []
    single = None
    for k in range(1, max_shards + 1):
        sub = WorkloadSpec(**{**spec.__dict__, "shards": k,
                              "clients": spec.clients * k,
                              "seed": spec.seed + k})
        sub.addrs = spec.addrs
        report = run_bench(sub)
        agg = report["aggregate"]["ops_per_sec"]
        if single is None:
            single = agg
        projected = single * k
        degradation = 100.0 * (1.0 - agg / projected) if projected else 0.0
        rows.append({"shards": k, "aggregate_ops_per_sec": agg,
                     "projected_linear": projected,
                     "degradation_pct": degradation})
    return {"sweep": rows}


def write_csv(report: dict, path: str) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if "sweep" in report:
            writer.writerow(["shards", "aggregate_ops_per_sec",
                             "projected_linear", "degradation_pct"])
            for row in report["sweep"]:
                writer.writerow([row["shards"], row["aggregate_ops_per_sec"],
                                 row["projected_linear"],
                                 row["degradation_pct"]])
            return
        writer.writerow(["bin_lo_ns", "bin_hi_ns", "count"])
        for row in report["latency"]["histogram"].get("bins", []):
            writer.writerow([row["lo"], row["hi"], row["count"]])


def write_plot(report: dict, path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    rows = report["latency"]["histogram"].get("bins", [])
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(10, 4))
    centers = [(r["lo"] + r["hi"]) / 2000.0 for r in rows]
    widths = [(r["hi"] - r["lo"]) / 1000.0 for r in rows]
    ax.bar(centers, [max(r["count"], 0.1) for r in rows], width=widths,
           align="center", edgecolor="black", linewidth=0.3)
    ax.set_yscale("log")
    ax.set_xlabel("latency (us)")
    ax.set_ylabel("samples")
    ax.set_title(f"{report['spec']['mix']} latency, "
                 f"{report['latency']['histogram']['samples']} samples")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mcas-bench",
                                     description="workload driver")
    parser.add_argument("--mix", choices=("read", "write", "ado"),
                        default="write")
    parser.add_argument("--key", type=int, default=8)
    parser.add_argument("--value", type=int, default=16)
    parser.add_argument("--clients", type=int, default=5)
    parser.add_argument("--shards", type=int, default=1)
    parser.add_argument("--ops", type=int, default=10000)
    parser.add_argument("--duration", type=float, default=0.0)
    parser.add_argument("--target", default="keyset:1000",
                        help="same-key or keyset:N")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--addr", default="127.0.0.1:11911",
                        help="comma-separated shard endpoints")
    parser.add_argument("--bins", type=int, default=BINS)
    parser.add_argument("--pool-size", type=int, default=32 << 20)
    parser.add_argument("--out", default=None, help="report JSON path")
    parser.add_argument("--csv", default=None)
    parser.add_argument("--plot", default=None, help="histogram PNG path")
    parser.add_argument("--sweep", action="store_true",
                        help="scale shards 1..N")
    parser.add_argument("--fairness", action="store_true",
                        help="clients on one shard, report shares")
    args = parser.parse_args(argv)

    spec = WorkloadSpec(
        mix=args.mix, key_len=args.key, value_len=args.value,
        clients=args.clients, shards=args.shards, ops=args.ops,
        duration=args.duration, target=args.target, seed=args.seed,
        addrs=args.addr.split(","), pool_size=args.pool_size,
        bins=args.bins)

    if args.sweep:
        report = scaling_sweep(spec, args.shards)
        for row in report["sweep"]:
            print(f"shards={row['shards']} "
                  f"aggregate={row['aggregate_ops_per_sec']:.0f}/s "
                  f"degradation={row['degradation_pct']:.1f}%")
    else:
        if args.fairness:
            spec.shards = 1
        report = run_bench(spec)
        agg = report["aggregate"]
        print(f"clients={spec.clients} shards={spec.shards} mix={spec.mix} "
              f"ops={agg['ops']} aggregate={agg['ops_per_sec']:.0f}/s")
        for c in report["clients"]:
            if "error" in c:
                print(f"  client {c['client']}: FAILED {c['error']}")
            else:
                print(f"  client {c['client']}: {c['ops_per_sec']:.0f}/s")
        if "fairness" in report:
            f = report["fairness"]
            print(f"fairness: ideal={f['ideal_share']:.4f} "
                  f"min={f['min_share']:.4f} max={f['max_share']:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
    if args.csv:
        write_csv(report, args.csv)
    if args.plot:
        write_plot(report, args.plot)
    return 1 if report.get("partial_failure") else 0


if __name__ == "__main__":
    sys.exit(main())
