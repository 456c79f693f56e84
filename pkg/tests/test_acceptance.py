"""Acceptance suite: one test per release criterion, sized as stated.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion
PASS lines as they complete.
"""

import json
import os
import random
import signal
import struct
import subprocess
import sys
import time
from pathlib import Path

import pytest

from mcaslite import protocol as wire
from mcaslite.ado import PoolMemory
from mcaslite.arena import REGION_SIZE, CrashSimBackend, PersistentArena
from mcaslite.bench import WorkloadSpec, build_histogram, run_bench, scaling_sweep
from mcaslite.client import Session
from mcaslite.config import ShardConfig, load_config
from mcaslite.engines import make_backend
from mcaslite.engines.hstore import (
    KIND_CC,
    KIND_HSTORE,
    SEG_HDR,
    ENTRY_SIZE,
    HopscotchStore,
)
from mcaslite.errors import NoSpaceError, Status
from mcaslite.plugins.versioning import (
    DEFAULT_MAX_VERSIONS,
    NoVersionError,
    VersionRoot,
    VersioningClient,
    root_len,
)
from mcaslite.reconalloc import ReconAllocator
from mcaslite.server import Session as SrvSession, Shard, ShardServer

from crash_utils import count_events, crash_states, run_until_event
from model_harness import run_model_trace

MB = 1 << 20


def announce(name: str) -> None:
    print(f"\nACCEPTANCE {name}: PASS", flush=True)


# ---------------------------------------------------------------------------
# Criterion 1: crash atomicity across >= 1,000 randomized flush-subset states
# injected during put / erase / expand / region-alloc / versioned put.
# ---------------------------------------------------------------------------

def _engine_fixture(kind, n_ops, seed):
    def build():
        backend = CrashSimBackend(96 * MB)
        arena = PersistentArena.create(96 * MB, backend=backend)
        regions = [(d.offset, d.length) for d in arena.region_alloc(1, 64 * MB)]
        store = HopscotchStore.create(arena, 1, regions, kind, 64)
        rng = random.Random(seed)
        for _ in range(n_ops):
            store.put(b"k%02d" % rng.randrange(40), rng.randbytes(40))
        return backend, (arena, regions, store)
    return build


def _check_engine_states(build, op, expected_states, rng, budget,
                         subsets=5):
    checked = 0
    _, ref = build()
    regions = ref[1]
    for _event, _crashed, image in crash_states(build, op, rng,
                                                subsets_per_event=subsets):
        arena2 = PersistentArena.open(backend=image)
        store2 = HopscotchStore.open(arena2, 1, regions)
        got = store2.audit()
        assert got in expected_states, "torn state after recovery"
        checked += 1
        if checked >= budget:
            break
    return checked


def test_criterion_crash_atomicity():
    total = 0
    rng = random.Random(2026)

    for kind in (KIND_HSTORE, KIND_CC):
        build = _engine_fixture(kind, 50, seed=kind)
        _, ref = build()
        model = ref[2].audit()

        post_put = dict(model)
        post_put[b"NEW"] = b"N" * 40
        total += _check_engine_states(
            build, lambda c: c[2].put(b"NEW", b"N" * 40),
            (model, post_put), rng, budget=150)

        victim = sorted(model)[3]
        post_over = dict(model)
        post_over[victim] = b"OVER" * 10
        total += _check_engine_states(
            build, lambda c: c[2].put(victim, b"OVER" * 10),
            (model, post_over), rng, budget=150)

        post_erase = dict(model)
        del post_erase[victim]
        total += _check_engine_states(
            build, lambda c: c[2].erase(victim),
            (model, post_erase), rng, budget=150)

        total += _check_engine_states(
            build, lambda c: c[2].expand(), (model,), rng, budget=150)

    # region allocation / free
    def build_arena():
        backend = CrashSimBackend(192 * MB)
        arena = PersistentArena.create(192 * MB, backend=backend)
        arena.region_alloc(7, 2 * REGION_SIZE)
        return backend, arena

    _, ref_arena = build_arena()
    pre = ref_arena.owners()
    post = list(pre)
    post[post.index(0)] = 9
    for _event, _crashed, image in crash_states(
            build_arena, lambda a: a.region_alloc(9, REGION_SIZE), rng,
            subsets_per_event=8):
        owners = PersistentArena.open(backend=image).owners()
        assert owners in (pre, post), "torn region table"
        total += 1

    # versioned put at the root-update protocol level
    def build_vput():
        backend = CrashSimBackend(96 * MB)
        arena = PersistentArena.create(96 * MB, backend=backend)
        regions = [(d.offset, d.length) for d in arena.region_alloc(1, 64 * MB)]
        store = HopscotchStore.create(arena, 1, regions, KIND_HSTORE, 64)
        root_off, _, _ = store.ensure_outofline(b"doc", root_len(),
                                                create=True)
        memory = PoolMemory(arena, regions)
        root = VersionRoot(memory, root_off, DEFAULT_MAX_VERSIONS)
        root.init()
        for i in range(4):
            off = store.ado_alloc(32)
            arena.write(off, b"%02d" % i * 16)
            arena.persist(off, 32)
            root.add_version(off, 32)
        new_off = store.ado_alloc(32)
        arena.write(new_off, b"NEWVAL" + bytes(26))
        arena.persist(new_off, 32)
        return backend, (arena, regions, root, new_off)

    _, refv = build_vput()
    for _event, _crashed, image in crash_states(
            build_vput, lambda c: c[2].add_version(c[3], 32), rng,
            subsets_per_event=10):
        arena2 = PersistentArena.open(backend=image)
        store2 = HopscotchStore.open(arena2, 1, refv[1])
        root_off, _, _ = store2.ensure_outofline(b"doc", root_len())
        root2 = VersionRoot(PoolMemory(arena2, refv[1]), root_off,
                            DEFAULT_MAX_VERSIONS)
        root2.check_recovery()
        latest = arena2.read(*root2.get_version(0)[:2])
        prev = arena2.read(*root2.get_version(-1)[:2])
        assert (latest[:6], prev[:2]) in ((b"NEWVAL", b"03"),
                                          (b"03" * 3, b"02")), "torn history"
        total += 1

    assert total >= 1000, f"only {total} crash states checked"
    print(f"\n  [crash-atomicity] {total} flush-subset states, zero torn")
    announce("crash-atomicity")


# ---------------------------------------------------------------------------
# Criterion 2: 1e5 randomized ops per engine against a model map, hopscotch
# audit after every 1e3 ops.
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["hstore", "hstore-cc", "mapstore"])
def test_criterion_model_equivalence(kind):
    if kind == "mapstore":
        backend = make_backend(kind)
    else:
        arena = PersistentArena.create(96 * MB,
                                       backend=CrashSimBackend(96 * MB))
        backend = make_backend(kind, arena, base_size=128)
    pool = backend.create_pool(b"model", 64 * MB)
    audit = pool.store.audit if kind != "mapstore" else (
        lambda: dict(pool.items()))
    run_model_trace(pool, ops=100_000, seed=1234, key_space=600,
                    value_max=72, audit_every=1000, audit_fn=audit)
    announce(f"model-equivalence[{kind}]")


# ---------------------------------------------------------------------------
# Criterion 3: reconstitution with 1e4 live pairs; 1e4 further allocations
# overlap nothing; E_NO_SPACE outcomes match a never-restarted allocator.
# ---------------------------------------------------------------------------

def _live_extents(store) -> list[tuple[int, int]]:
    extents = [(off, SEG_HDR + count * ENTRY_SIZE)
               for count, _g, off in store.segs]
    ado_off, ado_len = struct.unpack(
        "<QQ", store.arena.read(store.hdr + 56, 16))
    if ado_off:
        extents.append((ado_off, ado_len))
    for key, _slot, entry in store._walk_committed():
        meta, = struct.unpack_from("<Q", entry, 8)
        flags = (meta >> 8) & 0xFF
        for field, bit in ((entry[16:40], 1), (entry[40:64], 2)):
            if not flags & bit:
                off, length = struct.unpack_from("<QQ", field, 0)
                extents.append((off, max(length, 1)))
    return extents


def test_criterion_reconstitution():
    backend = CrashSimBackend(96 * MB)
    arena = PersistentArena.create(96 * MB, backend=backend)
    be = make_backend("hstore", arena, base_size=1024)
    pool = be.create_pool(b"recon", 64 * MB)
    rng = random.Random(88)
    for i in range(10_000):
        pool.put(b"live%05d" % i, rng.randbytes(rng.choice([8, 40, 300])))
    image = backend.materialize(backend.pending_lines())
    arena2 = PersistentArena.open(backend=image)
    be2 = make_backend("hstore", arena2, base_size=1024)
    pool2 = be2.open_pool(b"recon")
    assert pool2.count() == 10_000
    for i in range(10_000):
        pool2.put(b"fresh%05d" % i, rng.randbytes(rng.choice([8, 40, 300])))
    extents = sorted(_live_extents(pool2.store))
    for (a0, a1), (b0, _b1) in zip(extents, extents[1:]):
        assert a0 + a1 <= b0, "allocation overlap after reconstitution"
    pool2.store.audit()

    # E_NO_SPACE parity on the allocator itself
    area = [(0, 8 * MB)]
    rng = random.Random(99)
    virgin = ReconAllocator(area)
    live = {}
    for _ in range(2000):
        size = rng.choice([64, 512, 4096, 20000])
        try:
            live[virgin.alloc(size)] = size
        except NoSpaceError:
            break
    rebuilt = ReconAllocator.reconstitute(area, list(live.items()))
    divergence = 0
    for _ in range(3000):
        size = rng.choice([64, 512, 4096, 20000, 400000])
        a = b = None
        try:
            a = virgin.alloc(size)
        except NoSpaceError:
            pass
        try:
            b = rebuilt.alloc(size)
        except NoSpaceError:
            pass
        divergence += (a is None) != (b is None)
    assert divergence == 0, f"{divergence} E_NO_SPACE divergences"
    announce("reconstitution")


# ---------------------------------------------------------------------------
# Criterion 4: expansion doubling 1024 -> 2048 -> 4096 -> 8192 with contents
# preserved at each step.
# ---------------------------------------------------------------------------

def test_criterion_expansion_doubling():
    arena = PersistentArena.create(96 * MB, backend=CrashSimBackend(96 * MB))
    be = make_backend("hstore", arena, base_size=1024)
    pool = be.create_pool(b"grow", 64 * MB)
    store = pool.store
    rng = random.Random(4)
    caps = [store.capacity]
    model = {}
    i = 0
    while store.capacity < 8192:
        key = b"key%06d" % i
        value = rng.randbytes(24)
        pool.put(key, value)
        model[key] = value
        i += 1
        if store.capacity != caps[-1]:
            caps.append(store.capacity)
            assert store.audit() == model, "contents lost across expansion"
    assert caps == [1024, 2048, 4096, 8192]
    print(f"\n  [expansion] bucket counts {caps}, {len(model)} pairs intact")
    announce("expansion-doubling")


# ---------------------------------------------------------------------------
# Criterion 5: persist-on-completion. 1e3 randomized kill points against a
# server shard on the crash simulator: no acknowledged mutation is ever
# lost; plus whole-process SIGKILL cycles on a file-backed server.
# ---------------------------------------------------------------------------

class _FakeSock:
    def __init__(self):
        self.sent = bytearray()

    def send(self, data):
        self.sent += data
        return len(data)

    def sendall(self, data):
        self.sent += data

    def close(self):
        pass


def test_criterion_protocol_durability(tmp_path):
    backend = CrashSimBackend(96 * MB)
    arena = PersistentArena.create(96 * MB, backend=backend)
    cfg = load_config(json.dumps({"shards": [
        {"port": 1, "default_backend": "hstore",
         "dax_config": [{"path": "unused", "size": "96M"}]}]}))
    shard = Shard(0, cfg.shards[0], cfg, arena=arena)
    shard.open_storage()
    fake = SrvSession(_FakeSock(), ("test", 0))

    reader = wire.FrameReader()

    def roundtrip(msg):
        rid = roundtrip.next_id
        roundtrip.next_id += 1
        frame = wire.split_frames(wire.encode_request(msg, rid))[0]
        shard._handle_frame(fake, frame, fresh=True)
        frames = reader.feed(bytes(fake.sock.sent))
        fake.sock.sent.clear()
        resp = wire.decode_response(frames, msg.opcode)
        return resp
    roundtrip.next_id = 1

    pool = roundtrip(wire.CreatePool(b"dur", 64 * MB)).pool
    rng = random.Random(404)
    acked: dict[bytes, bytes] = {}
    kills = 0

    def verify_image(image, inflight=None):
        arena2 = PersistentArena.open(backend=image)
        be2 = make_backend("hstore", arena2, base_size=1024)
        pool2 = be2.open_pool(b"dur")
        got = pool2.store.audit()
        allowed = (acked,)
        if inflight is not None:
            alt = dict(acked)
            kind, key, value = inflight
            if kind == "put":
                alt[key] = value
            else:
                alt.pop(key, None)
            allowed = (acked, alt)
        assert got in allowed, "acknowledged mutation lost or torn state"

    hook_state = {"armed": False, "at": 0, "n": 0, "inflight": None}

    def hook(kind, off, ln):
        if not hook_state["armed"]:
            return
        hook_state["n"] += 1
        if hook_state["n"] == hook_state["at"]:
            verify_image(backend.random_crash(rng), hook_state["inflight"])

    backend.event_hook = hook
    try:
        for i in range(1000):
            key = b"k%03d" % rng.randrange(150)
            do_erase = rng.random() < 0.25 and key in acked
            value = rng.randbytes(rng.randrange(1, 64))
            # arm a mid-operation kill at a random event
            hook_state.update(armed=True, at=rng.randrange(1, 12), n=0,
                              inflight=("erase", key, None) if do_erase
                              else ("put", key, value))
            if do_erase:
                resp = roundtrip(wire.Erase(pool, key))
                if resp.status == Status.S_OK:
                    del acked[key]
            else:
                resp = roundtrip(wire.Put(pool, key, value))
                if resp.status == Status.S_OK:
                    acked[key] = value
            hook_state["armed"] = False
            kills += 1
            # kill immediately after the acknowledgment reached the client
            if i % 4 == 0:
                verify_image(backend.random_crash(rng))
    finally:
        backend.event_hook = None
    assert kills >= 1000
    print(f"\n  [durability] {kills} kill points, zero acked losses")

    # whole-process SIGKILL on a file-backed server
    conf = tmp_path / "kill.json"
    pmem = tmp_path / "kill.pmem"
    conf.write_text(json.dumps({"shards": [
        {"port": 24917, "default_backend": "hstore",
         "dax_config": [{"path": str(pmem), "size": "96M"}]}]}))
    expected = {}
    for cycle in range(3):
        proc = subprocess.Popen(
            [sys.executable, "-m", "mcaslite.server", "--conf", str(conf)])
        try:
            deadline = time.time() + 10
            session = None
            while time.time() < deadline:
                try:
                    session = Session("127.0.0.1:24917")
                    break
                except Exception:
                    time.sleep(0.1)
            assert session is not None, "server did not come up"
            pool_id = session.open_pool(b"kp", 32 * MB, create_on_demand=True)
            for key, value in expected.items():
                assert session.get(pool_id, key) == value
            for i in range(30):
                key = b"c%d-%02d" % (cycle, i)
                value = os.urandom(24)
                session.put(pool_id, key, value)
                expected[key] = value
        finally:
            proc.send_signal(signal.SIGKILL)
            proc.wait()
    print(f"  [durability] 3 SIGKILL cycles, {len(expected)} pairs intact")
    announce("protocol-durability")


# ---------------------------------------------------------------------------
# Criterion 6: ADO contracts. Strict round-robin over two plugins for 100
# invokes; deferred-unlock audit after every work; passthru echo 1 B..1 MiB;
# 50 ms signal sleep visibly stalls the client (+-10 ms).
# ---------------------------------------------------------------------------

def test_criterion_ado_contracts(server_factory):
    shard = {"default_backend": "hstore",
             "ado_plugins": ["mcaslite.plugins.passthru:TagEcho",
                             "mcaslite.plugins.passthru:TagEcho"]}
    server, addrs = server_factory([shard], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"ado", 64 * MB)
        tags = []
        for i in range(100):
            bufs = s.invoke_ado(pool, b"rr", b"m%d" % i, value_size=64)
            tags.append(int(bufs[0].split(b":", 1)[0]))
            assert not server.shards[0].locks.audit(), \
                "locks leaked after work completion"
        assert tags == [0, 1] * 50, "round robin must alternate strictly"
        size = 1
        while size <= 1 * MB:
            payload = os.urandom(size)
            bufs = s.invoke_ado(pool, b"echo", payload, value_size=64)
            assert bufs[0][2:] == payload, f"echo mismatch at {size} B"
            size *= 16

    stall_shard = {"default_backend": "hstore",
                   "ado_plugins": ["mcaslite.plugins.passthru:SleepEcho"],
                   "ado_signals": ["post-put"],
                   "ado_params": {"sleep_ms": 50}}
    server2, addrs2 = server_factory([stall_shard], ado_mode="inproc")
    with Session(addrs2[0]) as s:
        pool = s.create_pool(b"stall", 32 * MB)
        delays = []
        for i in range(5):
            t0 = time.perf_counter()
            s.put(pool, b"k%d" % i, b"v")
            delays.append(time.perf_counter() - t0)
        delays.sort()
        median = delays[2]
        assert 0.040 <= median <= 0.060, \
            f"signal stall {median * 1e3:.1f} ms outside 50 +- 10 ms"
        assert not server2.shards[0].locks.audit()
    print(f"\n  [ado] alternation strict, echo 1B..1MiB, "
          f"stall {median * 1e3:.1f} ms")
    announce("ado-contracts")


# ---------------------------------------------------------------------------
# Criterion 7: versioning semantics against a hand oracle for 1e3 random
# operations (MAX_VERSIONS=8); every versioned-put crash point recovers to
# the pre- or post-state (covered per event with multiple flush subsets).
# ---------------------------------------------------------------------------

def test_criterion_versioning(server_factory):
    shard = {"default_backend": "hstore",
             "ado_plugins": ["mcaslite.plugins.versioning"]}
    _, addrs = server_factory([shard], ado_mode="inproc")

    class HandOracle:
        def __init__(self):
            self.history = []

        def vget(self, index):
            kept = self.history[-DEFAULT_MAX_VERSIONS:]
            back = -index
            if index > 0 or back >= len(kept):
                raise NoVersionError(str(index))
            return kept[len(kept) - 1 - back]

    rng = random.Random(505)
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"ver", 64 * MB)
        vc = VersioningClient(s, pool)
        oracles = {}
        puts = 0
        for _ in range(1000):
            key = b"doc%d" % rng.randrange(8)
            oracle = oracles.setdefault(key, HandOracle())
            if rng.random() < 0.5 or not oracle.history:
                value = rng.randbytes(rng.randrange(1, 48))
                vc.vput(key, value)
                oracle.history.append(value)
                puts += 1
            for index in (0, -1):
                try:
                    expected = oracle.vget(index)
                except NoVersionError:
                    with pytest.raises(NoVersionError):
                        vc.vget(key, index)
                else:
                    assert vc.vget(key, index)[0] == expected
        assert puts >= 400

    # exhaustive crash points of one versioned put (flush subsets sampled)
    def build():
        backend = CrashSimBackend(96 * MB)
        arena = PersistentArena.create(96 * MB, backend=backend)
        regions = [(d.offset, d.length) for d in arena.region_alloc(1, 64 * MB)]
        store = HopscotchStore.create(arena, 1, regions, KIND_HSTORE, 64)
        root_off, _, _ = store.ensure_outofline(b"doc", root_len(),
                                                create=True)
        memory = PoolMemory(arena, regions)
        root = VersionRoot(memory, root_off, DEFAULT_MAX_VERSIONS)
        root.init()
        for i in range(6):
            off = store.ado_alloc(32)
            arena.write(off, b"%02d" % i * 16)
            arena.persist(off, 32)
            root.add_version(off, 32)
        new_off = store.ado_alloc(32)
        arena.write(new_off, b"NEWVAL" + bytes(26))
        arena.persist(new_off, 32)
        return backend, (arena, regions, root, new_off)

    rng = random.Random(506)
    states = 0
    _, ref = build()
    for _event, _crashed, image in crash_states(
            build, lambda c: c[2].add_version(c[3], 32), rng,
            subsets_per_event=8):
        arena2 = PersistentArena.open(backend=image)
        store2 = HopscotchStore.open(arena2, 1, ref[1])
        root_off, _, _ = store2.ensure_outofline(b"doc", root_len())
        root2 = VersionRoot(PoolMemory(arena2, ref[1]), root_off,
                            DEFAULT_MAX_VERSIONS)
        root2.check_recovery()
        latest = arena2.read(*root2.get_version(0)[:2])
        prev = arena2.read(*root2.get_version(-1)[:2])
        assert (latest[:6], prev[:2]) in ((b"NEWVAL", b"05"),
                                          (b"05" * 3, b"04")), \
            "versioned put crash state neither pre nor post"
        states += 1
    print(f"\n  [versioning] oracle x1000 ops, {states} crash states clean")
    announce("versioning-personality")


# ---------------------------------------------------------------------------
# Criterion 8: benchmark artifact fidelity. 40-bin histogram over 1e6
# samples, a shard-scaling table with the degradation column, and an
# 8-client fairness run within +-30% of 1/8.
# ---------------------------------------------------------------------------

@pytest.fixture
def bench_servers(tmp_path):
    procs = []
    addrs = []
    for i in range(4):
        port = 24931 + i
        conf = tmp_path / f"bench{i}.json"
        conf.write_text(json.dumps({"shards": [
            {"port": port, "default_backend": "mapstore"}]}))
        procs.append(subprocess.Popen(
            [sys.executable, "-m", "mcaslite.server", "--conf", str(conf)]))
        addrs.append(f"127.0.0.1:{port}")
    deadline = time.time() + 15
    for addr in addrs:
        while True:
            try:
                Session(addr).close()
                break
            except Exception:
                if time.time() > deadline:
                    raise RuntimeError("bench servers did not start")
                time.sleep(0.1)
    yield addrs
    for proc in procs:
        proc.terminate()
    for proc in procs:
        proc.wait(timeout=5)


def test_criterion_bench_artifacts(bench_servers, tmp_path):
    addrs = bench_servers
    # one million latency samples across eight clients on four shards
    spec = WorkloadSpec(mix="read", key_len=8, value_len=16, clients=8,
                        shards=4, ops=125_000, target="keyset:100",
                        seed=2026, addrs=addrs)
    t0 = time.time()
    report = run_bench(spec)
    took = time.time() - t0
    hist = report["latency"]["histogram"]
    assert hist["samples"] == 1_000_000
    assert len(hist["bins"]) == 40
    assert sum(b["count"] for b in hist["bins"]) == 1_000_000
    assert not report["partial_failure"]
    agg = report["aggregate"]
    assert abs(agg["ops"] / agg["elapsed_s"] - agg["ops_per_sec"]) \
        <= 0.01 * agg["ops_per_sec"]
    out = tmp_path / "report.json"
    out.write_text(json.dumps(report))
    print(f"\n  [bench] 1e6 samples in {took:.0f}s, "
          f"aggregate {agg['ops_per_sec']:.0f}/s")

    # shard-scaling sweep table with the degradation-from-linear column
    sweep_spec = WorkloadSpec(mix="read", clients=2, shards=4, ops=2000,
                              target="keyset:50", seed=7, addrs=addrs)
    sweep = scaling_sweep(sweep_spec, 4)
    rows = sweep["sweep"]
    assert [r["shards"] for r in rows] == [1, 2, 3, 4]
    assert rows[0]["degradation_pct"] == 0.0
    assert all("degradation_pct" in r and "projected_linear" in r
               for r in rows)

    # fairness: eight clients on one shard, each within +-30% of 1/8
    fair_spec = WorkloadSpec(mix="read", clients=8, shards=1,
                             ops=4000, target="keyset:100", seed=11,
                             addrs=addrs[:1])
    fair = run_bench(fair_spec)
    shares = fair["fairness"]
    ideal = 1.0 / 8.0
    assert shares["min_share"] >= 0.7 * ideal, shares
    assert shares["max_share"] <= 1.3 * ideal, shares
    print(f"  [bench] fairness min={shares['min_share']:.4f} "
          f"max={shares['max_share']:.4f} (ideal {ideal:.4f})")
    announce("benchmark-artifacts")
