import random

import pytest

from mcaslite.arena import CrashSimBackend, PersistentArena
from mcaslite.ado import PoolMemory
from mcaslite.client import Session
from mcaslite.engines.hstore import KIND_HSTORE, HopscotchStore
from mcaslite.errors import KeyNotFoundError
from mcaslite.plugins.versioning import (
    DEFAULT_MAX_VERSIONS,
    NoVersionError,
    VersionRoot,
    VersioningClient,
    root_len,
)

from crash_utils import crash_states

MB = 1 << 20

VSHARD = {"default_backend": "hstore",
          "ado_plugins": ["mcaslite.plugins.versioning"]}


class HandOracle:
    """Replays the ring arithmetic over a plain history list."""

    def __init__(self, max_versions=DEFAULT_MAX_VERSIONS):
        self.max_versions = max_versions
        self.history: list[bytes] = []

    def vput(self, value: bytes) -> None:
        self.history.append(value)

    def vget(self, index: int) -> bytes:
        kept = self.history[-self.max_versions:]
        back = -index
        if index > 0 or back >= len(kept):
            raise NoVersionError(str(index))
        return kept[len(kept) - 1 - back]


def test_versioning_against_hand_oracle(server_factory):
    server, addrs = server_factory([dict(VSHARD)], ado_mode="inproc")
    rng = random.Random(77)
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"vp", 64 * MB)
        vc = VersioningClient(s, pool)
        oracles: dict[bytes, HandOracle] = {}
        for n in range(400):
            key = b"doc%d" % rng.randrange(6)
            oracle = oracles.setdefault(key, HandOracle())
            if rng.random() < 0.55 or not oracle.history:
                value = rng.randbytes(rng.randrange(1, 64))
                vc.vput(key, value)
                oracle.vput(value)
            else:
                index = -rng.randrange(0, DEFAULT_MAX_VERSIONS + 1)
                try:
                    expected = oracle.vget(index)
                except NoVersionError:
                    with pytest.raises(NoVersionError):
                        vc.vget(key, index)
                else:
                    value, ts = vc.vget(key, index)
                    assert value == expected
        assert not server.shards[0].locks.audit()


def test_vget_semantics_explicit(server_factory):
    _, addrs = server_factory([dict(VSHARD)], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"vx", 64 * MB)
        vc = VersioningClient(s, pool)
        vc.vput(b"k", b"A")
        assert vc.vget(b"k", 0)[0] == b"A"
        vc.vput(b"k", b"B")
        assert vc.vget(b"k", 0)[0] == b"B"
        assert vc.vget(b"k", -1)[0] == b"A"
        for i in range(DEFAULT_MAX_VERSIONS + 2):
            vc.vput(b"k", b"v%d" % i)
        with pytest.raises(NoVersionError):
            vc.vget(b"k", -DEFAULT_MAX_VERSIONS)
        assert vc.vget(b"k", -(DEFAULT_MAX_VERSIONS - 1))[0] == b"v2"
        with pytest.raises(KeyNotFoundError):
            vc.vget(b"missing", 0)


def test_timestamps_monotonic(server_factory):
    _, addrs = server_factory([dict(VSHARD)], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"ts", 64 * MB)
        vc = VersioningClient(s, pool)
        vc.vput(b"k", b"one")
        vc.vput(b"k", b"two")
        _, ts_new = vc.vget(b"k", 0)
        _, ts_old = vc.vget(b"k", -1)
        assert ts_new > ts_old > 0


def test_memory_balance_no_leak(server_factory):
    server, addrs = server_factory([dict(VSHARD)], ado_mode="inproc")
    with Session(addrs[0]) as s:
        pool = s.create_pool(b"bal", 64 * MB)
        vc = VersioningClient(s, pool)
        for i in range(DEFAULT_MAX_VERSIONS):
            vc.vput(b"k", bytes(32))
        shard = server.shards[0]
        store = shard.pools[pool].store
        live_before = len(store.ado_heap.live_allocations())
        for i in range(50):
            vc.vput(b"k", bytes(32))
        live_after = len(store.ado_heap.live_allocations())
        assert live_after == live_before, "displaced versions must be freed"


# -- crash consistency at the root-update protocol level ----------------------

def _plugin_level_setup():
    backend = CrashSimBackend(96 * MB)
    arena = PersistentArena.create(96 * MB, backend=backend)
    regions = [(d.offset, d.length) for d in arena.region_alloc(1, 64 * MB)]
    store = HopscotchStore.create(arena, 1, regions, KIND_HSTORE, 64)
    root_off, _, _ = store.ensure_outofline(b"doc", root_len(), create=True)
    memory = PoolMemory(arena, regions)
    root = VersionRoot(memory, root_off, DEFAULT_MAX_VERSIONS)
    root.init()
    return backend, arena, regions, store, memory, root


def test_vput_crash_recovers_pre_or_post_every_event():
    rng = random.Random(31)
    history_len = 5

    def build():
        backend, arena, regions, store, memory, root = _plugin_level_setup()
        allocs = []
        for i in range(history_len):
            off = store.ado_alloc(32)
            arena.write(off, b"%02d" % i * 16)
            arena.persist(off, 32)
            root.add_version(off, 32)
            allocs.append(off)
        new_off = store.ado_alloc(32)
        arena.write(new_off, b"NEW-VALUE" + bytes(23))
        arena.persist(new_off, 32)
        return backend, (arena, regions, root, new_off)

    def op(ctx):
        _arena, _regions, root, new_off = ctx
        root.add_version(new_off, 32)

    _, ref_ctx = build()
    ref_root = ref_ctx[2]
    pre_views = [ref_root.get_version(-k) for k in range(history_len)]

    checked = 0
    for _event, crashed, image in crash_states(build, op, rng,
                                               subsets_per_event=3):
        arena2 = PersistentArena.open(backend=image)
        regions = ref_ctx[1]
        store2 = HopscotchStore.open(arena2, 1, regions)
        root_off, _, _ = store2.ensure_outofline(b"doc", root_len())
        memory2 = PoolMemory(arena2, regions)
        root2 = VersionRoot(memory2, root_off, DEFAULT_MAX_VERSIONS)
        root2.check_recovery()
        latest_off, latest_len, _ = root2.get_version(0)
        latest = memory2.read(latest_off, latest_len)
        if latest.startswith(b"NEW-VALUE"):
            # post state: history shifted by one
            assert memory2.read(*root2.get_version(-1)[:2])[:2] == b"04"
        else:
            # pre state: identical descriptor history (timestamps are
            # wall-clock and differ between rebuilt traces)
            for k in range(history_len):
                off, length, _ts = root2.get_version(-k)
                r_off, r_len, _r_ts = pre_views[k]
                assert (off, length) == (r_off, r_len)
                assert memory2.read(off, 2) == b"%02d" % (history_len - 1 - k)
        checked += 1
    assert checked >= 10
