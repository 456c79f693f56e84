import random

import pytest

from mcaslite.arena import (
    REGION_SIZE,
    CrashSimBackend,
    PersistentArena,
)
from mcaslite.errors import (
    BadCapacityError,
    CorruptHeaderError,
    NoSpaceError,
    RangeError,
    UnknownPoolError,
)

from crash_utils import count_events, crash_states, run_until_event

MB = 1 << 20


def test_fresh_arena_has_no_allocations():
    arena = PersistentArena.create(128 * MB, backend=CrashSimBackend(128 * MB))
    assert arena.regions_of(1) == []
    assert arena.free_bytes() == 3 * REGION_SIZE  # region 0 holds metadata


def test_capacity_must_be_multiple_of_granularity(tmp_path):
    with pytest.raises(BadCapacityError):
        PersistentArena.create(100 * MB, path=str(tmp_path / "a.pmem"))
    with pytest.raises(BadCapacityError):
        PersistentArena.create(32 * MB, backend=CrashSimBackend(32 * MB))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.pmem"
    path.write_bytes(b"XXXX" + bytes(64 * MB - 4))
    with pytest.raises(CorruptHeaderError):
        PersistentArena.open(str(path))


def test_alloc_rounds_to_regions():
    arena = PersistentArena.create(192 * MB, backend=CrashSimBackend(192 * MB))
    descs = arena.region_alloc(7, 100 * MB)
    assert len(descs) == 4
    assert sum(d.length for d in descs) == 128 * MB
    with pytest.raises(RangeError):
        arena.region_alloc(7, 0)
    with pytest.raises(NoSpaceError):
        arena.region_alloc(8, 64 * MB)  # only 1 region left


def test_free_zero_fills_and_releases():
    arena = PersistentArena.create(192 * MB, backend=CrashSimBackend(192 * MB))
    descs = arena.region_alloc(7, 100 * MB)
    arena.write(descs[0].offset, b"payload bytes")
    arena.persist(descs[0].offset, 16)
    before = arena.free_bytes()
    freed = arena.region_free(7)
    assert freed == 128 * MB
    assert arena.free_bytes() == before + 128 * MB
    assert arena.read(descs[0].offset, 64) == bytes(64)
    with pytest.raises(UnknownPoolError):
        arena.region_free(7)


def test_round_trip_restores_free_space():
    arena = PersistentArena.create(192 * MB, backend=CrashSimBackend(192 * MB))
    baseline = arena.free_bytes()
    arena.region_alloc(3, 33 * MB)
    arena.region_free(3)
    assert arena.free_bytes() == baseline


def test_persist_is_range_checked():
    arena = PersistentArena.create(64 * MB, backend=CrashSimBackend(64 * MB))
    with pytest.raises(RangeError):
        arena.persist(64 * MB - 8, 64)
    with pytest.raises(RangeError):
        arena.write(64 * MB, b"x")


def test_alloc_crash_yields_pre_or_post_state():
    rng = random.Random(11)

    def build():
        backend = CrashSimBackend(192 * MB)
        arena = PersistentArena.create(192 * MB, backend=backend)
        arena.region_alloc(7, 100 * MB)
        return backend, arena

    _, ref = build()
    pre = ref.owners()
    post = list(pre)
    post[post.index(0)] = 9

    checked = 0
    for _event, _crashed, image in crash_states(
            build, lambda a: a.region_alloc(9, REGION_SIZE), rng):
        recovered = PersistentArena.open(backend=image)
        owners = recovered.owners()
        assert owners in (pre, post), f"torn region table: {owners}"
        checked += 1
    assert checked > 5


def test_free_crash_then_free_again_is_idempotent():
    rng = random.Random(13)

    def build():
        backend = CrashSimBackend(128 * MB)
        arena = PersistentArena.create(128 * MB, backend=backend)
        descs = arena.region_alloc(7, 2 * REGION_SIZE)
        for d in descs:
            arena.write(d.offset, b"\xAA" * 4096)
            arena.persist(d.offset, 4096)
        return backend, arena

    backend, arena = build()
    total = count_events(backend, lambda: arena.region_free(7))
    for event in range(1, total + 1, max(1, total // 12)):
        backend, arena = build()
        crashed = run_until_event(backend, lambda: arena.region_free(7), event)
        image = backend.random_crash(rng)
        recovered = PersistentArena.open(backend=image)
        if 7 in recovered.owners():
            recovered.region_free(7)  # idempotent completion
        assert 7 not in recovered.owners()
        for d in PersistentArena.create(
                128 * MB, backend=CrashSimBackend(128 * MB)).region_alloc(
                    7, 2 * REGION_SIZE):
            assert recovered.read(d.offset, 4096) == bytes(4096)
        if not crashed:
            break


def test_region_table_never_overlaps_across_crash_states():
    rng = random.Random(5)

    def build():
        backend = CrashSimBackend(192 * MB)
        arena = PersistentArena.create(192 * MB, backend=backend)
        arena.region_alloc(1, REGION_SIZE)
        arena.region_alloc(2, 2 * REGION_SIZE)
        arena.region_free(1)
        return backend, arena

    def op(arena):
        arena.region_alloc(3, 2 * REGION_SIZE)
        arena.region_free(2)

    for _event, _crashed, image in crash_states(build, op, rng):
        recovered = PersistentArena.open(backend=image)
        descs = [d for owner in set(recovered.owners()) if owner
                 for d in recovered.regions_of(owner)]
        spans = sorted((d.offset, d.offset + d.length) for d in descs)
        for (a0, a1), (b0, _b1) in zip(spans, spans[1:]):
            assert a1 <= b0, "region descriptors overlap"


def test_pool_directory_round_trip():
    backend = CrashSimBackend(128 * MB)
    arena = PersistentArena.create(128 * MB, backend=backend)
    arena.region_alloc(5, REGION_SIZE)
    arena.dir_create(b"alpha", 5, REGION_SIZE)
    entry = arena.dir_lookup(b"alpha")
    assert entry is not None and entry.pool_id == 5
    reopened = PersistentArena.open(
        backend=backend.materialize(backend.pending_lines()))
    again = reopened.dir_lookup(b"alpha")
    assert again is not None and again.first_region == REGION_SIZE


def test_recover_completes_dead_pool_and_orphan_cleanup():
    backend = CrashSimBackend(128 * MB)
    arena = PersistentArena.create(128 * MB, backend=backend)
    arena.region_alloc(5, REGION_SIZE)
    arena.dir_create(b"alpha", 5, REGION_SIZE)
    entry = arena.dir_lookup(b"alpha")
    arena.dir_mark_dead(entry.slot)
    # crash before region_free: reopen must finish the deletion
    image = backend.materialize(backend.pending_lines())
    recovered = PersistentArena.open(backend=image)
    assert recovered.dir_lookup(b"alpha") is None
    assert 5 not in recovered.owners()


def test_reclaim_orphans_frees_uncommitted_pools():
    # crash between region allocation and the directory commit leaves
    # owned regions with no directory entry; the pool layer reclaims them
    backend = CrashSimBackend(128 * MB)
    arena = PersistentArena.create(128 * MB, backend=backend)
    arena.region_alloc(3, REGION_SIZE)
    arena.dir_create(b"kept", 3, REGION_SIZE)
    arena.region_alloc(9, REGION_SIZE)  # never reaches the directory
    image = backend.materialize(backend.pending_lines())
    recovered = PersistentArena.open(backend=image)
    assert recovered.owners().count(9) == 1  # plain recovery keeps it
    assert recovered.reclaim_orphans() == REGION_SIZE
    assert 9 not in recovered.owners()
    assert recovered.owners().count(3) == 1
    assert recovered.dir_lookup(b"kept") is not None


def test_mapped_file_backend_round_trip(tmp_path):
    path = str(tmp_path / "arena.pmem")
    arena = PersistentArena.create(64 * MB, path=path)
    descs = arena.region_alloc(2, REGION_SIZE)
    arena.write(descs[0].offset, b"durable")
    arena.persist(descs[0].offset, 7)
    arena.close()
    reopened = PersistentArena.open(path)
    assert reopened.read(descs[0].offset, 7) == b"durable"
    assert reopened.owners().count(2) == 1
    reopened.close()
