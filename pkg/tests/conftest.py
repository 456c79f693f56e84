import json
import logging
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

logging.getLogger("mcaslite").setLevel(logging.ERROR)

from mcaslite.arena import CrashSimBackend, PersistentArena  # noqa: E402
from mcaslite.config import load_config  # noqa: E402
from mcaslite.server import ShardServer  # noqa: E402

MB = 1 << 20

_next_port = [23000]


def free_port() -> int:
    _next_port[0] += 1
    return _next_port[0]


@pytest.fixture
def sim_arena():
    backend = CrashSimBackend(96 * MB)
    arena = PersistentArena.create(96 * MB, backend=backend)
    return backend, arena


@pytest.fixture
def server_factory(tmp_path):
    servers = []

    def make(shards: list[dict], **top):
        for i, shard in enumerate(shards):
            shard.setdefault("port", free_port())
            if shard.get("default_backend", "hstore") != "mapstore":
                shard.setdefault("dax_config", [
                    {"path": str(tmp_path / f"shard{len(servers)}_{i}.pmem"),
                     "size": "96M"}])
        config = load_config(json.dumps({"shards": shards, **top}))
        server = ShardServer(config)
        server.start()
        servers.append(server)
        addrs = [f"127.0.0.1:{s.port}" for s in config.shards]
        return server, addrs

    yield make
    for server in servers:
        server.stop()
