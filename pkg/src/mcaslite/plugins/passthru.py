"""Test-fixture plugins: echo, tagged echo, and delayed echo."""

from __future__ import annotations

import time

from ..ado import AdoPlugin


class Passthru(AdoPlugin):
    """Returns the request payload unchanged; performs no real compute."""

    def do_work(self, ctx, work_id, key, values, request, new_root):
        return [bytes(request)]


class TagEcho(AdoPlugin):
    """Echo prefixed with this plugin's index; records requests so tests
    can check scheduling."""

    def __init__(self, index, params):
        super().__init__(index, params)
        self.calls: list[bytes] = []

    def do_work(self, ctx, work_id, key, values, request, new_root):
        self.calls.append(bytes(request))
        return [b"%d:" % self.index + request]


class SleepEcho(AdoPlugin):
    """Sleeps `sleep_ms` from ado_params before echoing; used to observe
    the client stall while a signal work is in flight."""

    def __init__(self, index, params):
        super().__init__(index, params)
        self.sleep_s = float(params.get("sleep_ms", 50)) / 1000.0
        self.calls: list[bytes] = []

    def do_work(self, ctx, work_id, key, values, request, new_root):
        self.calls.append(bytes(request))
        time.sleep(self.sleep_s)
        return [bytes(request)]


class Faulty(AdoPlugin):
    """Always raises; exercises the fault path."""

    def do_work(self, ctx, work_id, key, values, request, new_root):
        raise RuntimeError("deliberate plugin fault")


PLUGIN = Passthru
