import os
import random
import struct
import time

import pytest

from mcaslite import uipc
from mcaslite.ado import (
    CB_CREATE_KEY,
    CB_GET_POOL_INFO,
    MSG_CALLBACK_REPLY,
    CallbackRequest,
    WorkRequest,
    WorkResponse,
)
from mcaslite.client import Session
from mcaslite.errors import AdoFaultError, KeyNotFoundError, Status

MB = 1 << 20

INPROC_PASSTHRU = {
    "default_backend": "hstore",
    "ado_plugins": ["mcaslite.plugins.passthru"],
}


def test_work_message_round_trip():
    work = WorkRequest(7, 1, b"key", [(64, 128), (256, 32)], b"req-bytes",
                       new_root=True)
    assert WorkRequest.decode(work.encode()) == work
    done = WorkResponse(7, 0, [b"a", b"", b"ccc"])
    assert WorkResponse.decode(done.encode()) == done


def test_passthru_echo_range_of_sizes(server_factory):
    _, addrs = server_factory([dict(INPROC_PASSTHRU)], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"echo", 64 * MB)
        for size in (1, 17, 4096, 65536, 1 * MB):
            payload = os.urandom(size)
            bufs = s.invoke_ado(pool, b"k", payload, value_size=64)
            assert bufs == [payload], f"echo mismatch at {size}"


def test_invoke_absent_key_without_size(server_factory):
    _, addrs = server_factory([dict(INPROC_PASSTHRU)], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"nk", 32 * MB)
        with pytest.raises(KeyNotFoundError):
            s.invoke_ado(pool, b"ghost", b"req")
        # with a creation size the key appears, plugin sees new_root
        s.invoke_ado(pool, b"ghost", b"req", value_size=64)
        assert len(s.get(pool, b"ghost")) == 64


def test_round_robin_two_plugins(server_factory):
    shard = {"default_backend": "hstore",
             "ado_plugins": ["mcaslite.plugins.passthru:TagEcho",
                             "mcaslite.plugins.passthru:TagEcho"]}
    _, addrs = server_factory([shard], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"rr", 32 * MB)
        tags = []
        for i in range(100):
            bufs = s.invoke_ado(pool, b"k", b"m%d" % i, value_size=64)
            tags.append(int(bufs[0].split(b":", 1)[0]))
        assert tags == [0, 1] * 50, "round robin must alternate strictly"


def test_plugin_fault_reported_and_lock_reclaimed(server_factory):
    shard = {"default_backend": "hstore",
             "ado_plugins": ["mcaslite.plugins.passthru:Faulty"]}
    server, addrs = server_factory([shard], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"fault", 32 * MB)
        s.put(pool, b"k", b"value-bytes-0123456789-abcdef-xyz")
        with pytest.raises(AdoFaultError):
            s.invoke_ado(pool, b"k", b"boom")
        # lock released: plain ops proceed
        s.put(pool, b"k", b"after")
        assert s.get(pool, b"k") == b"after"
        assert not server.shards[0].locks.audit()


def test_callback_create_key_and_locks(server_factory):
    from mcaslite.plugins import passthru as mod

    class Creating(mod.Passthru):
        def do_work(self, ctx, work_id, key, values, request, new_root):
            off, length = ctx.create_key(b"made-by-plugin", 64)
            ctx.memory.write(off, b"Z" * 64)
            ctx.memory.persist(off, 64)
            info = ctx.get_pool_info()
            assert info["count"] >= 1
            return [b"ok"]

    mod.Creating = Creating
    shard = {"default_backend": "hstore",
             "ado_plugins": ["mcaslite.plugins.passthru:Creating"]}
    server, addrs = server_factory([shard], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"cb", 32 * MB)
        bufs = s.invoke_ado(pool, b"t", b"go", value_size=64)
        assert bufs == [b"ok"]
        assert s.get(pool, b"made-by-plugin") == b"Z" * 64
        assert not server.shards[0].locks.audit(), \
            "deferred locks must drain at completion"


def test_callback_iterate_and_ref_vector(server_factory):
    from mcaslite.plugins import passthru as mod

    class Walker(mod.Passthru):
        def do_work(self, ctx, work_id, key, values, request, new_root):
            pairs = []
            after = b""
            while True:
                got = ctx.iterate(after)
                if got is None:
                    break
                pairs.append(got)
                after = got[0]
            refs = ctx.get_ref_vector()
            assert len(refs) == len(pairs)
            return [b"%d" % len(pairs)]

    mod.Walker = Walker
    shard = {"default_backend": "hstore",
             "ado_plugins": ["mcaslite.plugins.passthru:Walker"]}
    _, addrs = server_factory([shard], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"it", 32 * MB)
        for i in range(5):
            s.put(pool, b"p%d" % i, b"v%d" % i)
        bufs = s.invoke_ado(pool, b"p0", b"walk")
        assert bufs == [b"5"]


def test_callback_resize_preserves_prefix(server_factory):
    from mcaslite.plugins import passthru as mod

    class Resizer(mod.Passthru):
        def do_work(self, ctx, work_id, key, values, request, new_root):
            off, length = ctx.resize_value(key, 128)
            head = ctx.memory.read(off, 5)
            return [head + b":%d" % length]

    mod.Resizer = Resizer
    shard = {"default_backend": "hstore",
             "ado_plugins": ["mcaslite.plugins.passthru:Resizer"]}
    _, addrs = server_factory([shard], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"rs", 32 * MB)
        s.put(pool, b"k", b"hello world")
        bufs = s.invoke_ado(pool, b"k", b"resize")
        assert bufs == [b"hello:128"]
        assert s.get(pool, b"k") == b"hello world" + bytes(128 - 11)


def test_signal_stall_delays_client(server_factory):
    shard = {"default_backend": "hstore",
             "ado_plugins": ["mcaslite.plugins.passthru:SleepEcho"],
             "ado_signals": ["post-put"],
             "ado_params": {"sleep_ms": 50}}
    server, addrs = server_factory([shard], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"sig", 32 * MB)
        stalls = []
        for i in range(3):
            t0 = time.perf_counter()
            s.put(pool, b"w%d" % i, b"x")
            stalls.append(time.perf_counter() - t0)
        stalled = sorted(stalls)[1]
        assert stalled >= 0.040, f"stall {stalled*1e3:.1f} ms (sleep is 50)"
        stats = s.get_statistics()
        assert stats.get("ado.signals", 0) >= 3
        assert not server.shards[0].locks.audit()


def test_signal_request_carries_prefix(server_factory):
    shard = {"default_backend": "hstore",
             "ado_plugins": ["mcaslite.plugins.passthru:TagEcho"],
             "ado_signals": ["post-put", "post-erase"]}
    server, addrs = server_factory([shard], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"sp", 32 * MB)
        s.put(pool, b"k", b"v")
        s.erase(pool, b"k")
        manager = server.shards[0].managers[pool]
        calls = manager.inproc_plugins[0].calls
        assert calls[0].startswith(b"ADO::Signal::post-put")
        assert calls[1].startswith(b"ADO::Signal::post-erase")


def test_no_signal_configured_no_ipc(server_factory):
    server, addrs = server_factory([dict(INPROC_PASSTHRU)],
                                   ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"nosig", 32 * MB)
        s.put(pool, b"k", b"v")
        assert pool not in server.shards[0].managers


def test_fuzzed_callback_stream_does_not_crash_shard(server_factory):
    server, addrs = server_factory([dict(INPROC_PASSTHRU)],
                                   ado_mode="inproc")
    shard = server.shards[0]
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"fz", 32 * MB)
        s.put(pool, b"k", b"v")
        rng = random.Random(5)
        for _ in range(300):
            cb = CallbackRequest(
                kind=rng.randrange(0, 16), work_id=rng.randrange(100),
                a=rng.randrange(2 ** 32), b=rng.randrange(2 ** 32),
                key=rng.randbytes(rng.randrange(0, 12)),
                data=rng.randbytes(rng.randrange(0, 20)))
            reply = shard._execute_callback(pool, cb)
            assert reply.status >= 0
        # shard still serves
        assert s.get(pool, b"k") == b"v"


def test_pool_memory_isolation(server_factory):
    server, addrs = server_factory([dict(INPROC_PASSTHRU)],
                                   ado_mode="inproc")
    shard = server.shards[0]
    with Session(addrs[0]) as s:
        pool_a = s.create_pool(b"iso-a", 32 * MB)
        pool_b = s.create_pool(b"iso-b", 32 * MB)
        s.put(pool_b, b"secret", b"s3cr3t")
        s.invoke_ado(pool_a, b"k", b"warm-up", value_size=64)
        manager = shard.managers[pool_a]
        memory_extents = manager.extents
        b_regions = [(d.offset, d.length)
                     for d in shard.arena.regions_of(pool_b)]
        from mcaslite.ado import PoolMemory
        from mcaslite.errors import RangeError
        memory = PoolMemory(shard.arena, memory_extents)
        with pytest.raises(RangeError):
            memory.read(b_regions[0][0], 64)


def test_session_resumes_after_lock_parked_request(server_factory):
    """A client op that parks behind an ADO write lock must unblock its
    session once the lock drops (regression: the session stayed blocked
    and every later request timed out)."""
    shard = {"default_backend": "hstore",
             "ado_plugins": ["mcaslite.plugins.passthru:SleepEcho"],
             "ado_params": {"sleep_ms": 60}}
    _, addrs = server_factory([shard], ado_mode="inproc")
    with Session(addrs[0]) as a, Session(addrs[0]) as b:
        pool = a.open_pool(b"park", 32 * MB, create_on_demand=True)
        b.open_pool(b"park")
        handle = a.async_invoke_ado(pool, b"hot", b"slow", value_size=32)
        time.sleep(0.01)  # the work is now in flight, key write-locked
        t0 = time.perf_counter()
        b.put(pool, b"hot", b"queued-behind-lock")  # parks, then resumes
        waited = time.perf_counter() - t0
        assert waited >= 0.03, "put should have waited for the lock"
        # the parked session must keep serving afterwards
        for i in range(20):
            b.put(pool, b"follow%d" % i, b"v")
            assert b.get(pool, b"follow%d" % i) == b"v"
        assert a.wait_async(handle).buffers == [b"slow"]
        assert b.get(pool, b"hot") == b"queued-behind-lock"


def test_ado_process_mode_and_death_recovery(server_factory, tmp_path):
    shard = {"default_backend": "hstore",
             "ado_plugins": ["mcaslite.plugins.passthru"],
             "dax_config": [{"path": str(tmp_path / "adoproc.pmem"),
                             "size": "96M"}]}
    server, addrs = server_factory([shard], ado_mode="process")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"proc", 32 * MB)
        bufs = s.invoke_ado(pool, b"k", b"cross-process", value_size=64)
        assert bufs == [b"cross-process"]
        manager = server.shards[0].managers[pool]
        assert manager.process is not None
        manager.process.kill()
        manager.process.wait()
        deadline = time.time() + 5
        while manager.queue is not None and time.time() < deadline:
            time.sleep(0.01)
        # next invoke relaunches the host
        bufs = s.invoke_ado(pool, b"k", b"after-restart")
        assert bufs == [b"after-restart"]


def test_pipelined_large_invokes_do_not_corrupt_spills(server_factory):
    """Async-pipelined works whose payloads spill to the shared scratch
    must all echo intact even when their combined size exceeds it
    (regression: a wrapping spill cursor could overwrite an unconsumed
    payload)."""
    _, addrs = server_factory([dict(INPROC_PASSTHRU)], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"spill", 64 * MB)
        payloads = [bytes([i]) * (3 * MB) for i in range(8)]  # 24 MiB total
        handles = [s.async_invoke_ado(pool, b"k%d" % i, payloads[i],
                                      value_size=32)
                   for i in range(8)]
        for i, h in enumerate(handles):
            resp = s.wait_async(h)
            assert resp.buffers == [payloads[i]], f"spill corrupted at {i}"


def test_cluster_event_reaches_plugins(server_factory):
    from mcaslite.plugins import passthru as mod

    class Listening(mod.Passthru):
        events = []

        def cluster_event(self, sender, kind, message):
            Listening.events.append((sender, kind, message))

    mod.Listening = Listening
    shard = {"default_backend": "hstore",
             "ado_plugins": ["mcaslite.plugins.passthru:Listening"]}
    server, addrs = server_factory([shard], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"cl", 32 * MB)
        s.invoke_ado(pool, b"k", b"warm", value_size=8)
        server.shards[0].broadcast_cluster_event("server-0", "join",
                                                 "node-7")
        deadline = time.time() + 2
        while not Listening.events and time.time() < deadline:
            time.sleep(0.01)
        assert Listening.events == [("server-0", "join", "node-7")]
