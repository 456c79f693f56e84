"""Storage engines: hstore, hstore-cc, mapstore."""

from __future__ import annotations

from ..errors import ConfigError
from .base import Pool, StoreBackend
from .hstore import HopscotchStore, HstoreBackend, HstorePool, bucket_address
from .mapstore import MapPool, MapstoreBackend

BACKENDS = ("hstore", "hstore-cc", "mapstore")


def make_backend(kind: str, arena=None, base_size: int = 1024) -> StoreBackend:
    if kind in ("hstore", "hstore-cc"):
        if arena is None:
            raise ConfigError("default_backend", f"{kind} needs an arena")
        return HstoreBackend(arena, kind, base_size)
    if kind == "mapstore":
        return MapstoreBackend()
    raise ConfigError("default_backend", f"unknown backend {kind!r}")
