"""Crash-injection driver over the simulating backend.

Crash states are explored by re-running a deterministic build + op on a
fresh backend, aborting at the k-th store/flush event, then materializing
the committed image plus random subsets of still-pending lines.
"""

from mcaslite.arena import CrashPoint, CrashSimBackend


def count_events(backend: CrashSimBackend, op) -> int:
    n = [0]

    def hook(kind, off, ln):
        n[0] += 1

    backend.event_hook = hook
    try:
        op()
    finally:
        backend.event_hook = None
    return n[0]


def run_until_event(backend: CrashSimBackend, op, event: int) -> bool:
    """Run op, crashing at the given 1-based event; True if it fired."""
    n = [0]

    def hook(kind, off, ln):
        n[0] += 1
        if n[0] == event:
            raise CrashPoint

    backend.event_hook = hook
    try:
        op()
        crashed = False
    except CrashPoint:
        crashed = True
    finally:
        backend.event_hook = None
    return crashed


def crash_states(build, op, rng, subsets_per_event=2, event_stride=1):
    """Yield (event, crashed, image) across every op event.

    `build()` returns (backend, ctx) with all prior state fully persisted;
    `op(ctx)` is the operation under test.  Each yielded image is an
    independent CrashSimBackend materializing one legal post-crash state.
    """
    backend, ctx = build()
    total = count_events(backend, lambda: op(ctx))
    for event in range(1, total + 1, event_stride):
        backend, ctx = build()
        crashed = run_until_event(backend, lambda: op(ctx), event)
        for _ in range(subsets_per_event):
            yield event, crashed, backend.random_crash(rng)
        if not crashed:
            break
