"""DRAM-only engine behind the common interface; contents do not survive
restart.  Keys iterate in byte order to match the ordered-container
behavior of the other backends' index views."""

from __future__ import annotations

import time
from typing import Iterator, Optional

from ..errors import (
    AlreadyExistsError,
    BadPoolError,
    KeyNotFoundError,
    RangeError,
)
from .base import Pool, StoreBackend, check_value_size


class MapPool(Pool):
    def __init__(self, pool_id: int, name: bytes, size: int):
        self.pool_id = pool_id
        self.name = name
        self.size = size
        self._map: dict[bytes, bytes] = {}
        self._write_ns: dict[bytes, int] = {}

    def put(self, key: bytes, value: bytes, no_overwrite: bool = False) -> None:
        if not key:
            raise RangeError("key must be at least 1 byte")
        check_value_size(len(value))
        if no_overwrite and key in self._map:
            raise AlreadyExistsError(key.hex())
        self._map[key] = value
        self._write_ns[key] = time.time_ns()

    def get(self, key: bytes) -> bytes:
        try:
            return self._map[key]
        except KeyError:
            raise KeyNotFoundError(key.hex()) from None

    def erase(self, key: bytes) -> None:
        if key not in self._map:
            raise KeyNotFoundError(key.hex())
        del self._map[key]
        self._write_ns.pop(key, None)

    def resize_value(self, key: bytes, new_size: int) -> None:
        check_value_size(new_size)
        old = self.get(key)
        if len(old) >= new_size:
            self._map[key] = old[:new_size]
        else:
            self._map[key] = old + bytes(new_size - len(old))
        self._write_ns[key] = time.time_ns()

    def count(self) -> int:
        return len(self._map)

    def keys(self) -> Iterator[bytes]:
        return iter(sorted(self._map))

    def items(self) -> Iterator[tuple[bytes, bytes]]:
        for key in sorted(self._map):
            yield key, self._map[key]

    def attributes(self, key: Optional[bytes] = None) -> dict:
        if key is None:
            return {"count": len(self._map), "size": self.size, "free_bytes": 0}
        if key not in self._map:
            raise KeyNotFoundError(key.hex())
        return {"value_len": len(self._map[key]),
                "write_epoch_ns": self._write_ns.get(key, 0)}

    def read_value_slice(self, key: bytes, offset: int, length: int) -> bytes:
        value = self.get(key)
        if offset < 0 or offset + length > len(value):
            raise RangeError(f"slice [{offset}, +{length}) beyond value")
        return value[offset:offset + length]

    def write_value_slice(self, key: bytes, offset: int, data: bytes) -> None:
        value = bytearray(self.get(key))
        if offset < 0 or offset + len(data) > len(value):
            raise RangeError(f"slice [{offset}, +{len(data)}) beyond value")
        value[offset:offset + len(data)] = data
        self._map[key] = bytes(value)
        self._write_ns[key] = time.time_ns()


class MapstoreBackend(StoreBackend):
    kind = "mapstore"

    def __init__(self):
        self._pools: dict[bytes, MapPool] = {}
        self._next_id = 1

    def create_pool(self, name: bytes, size: int) -> MapPool:
        pool = self._pools.get(name)
        if pool is None:
            pool = MapPool(self._next_id, name, size)
            self._next_id += 1
            self._pools[name] = pool
        return pool

    def open_pool(self, name: bytes) -> Optional[MapPool]:
        return self._pools.get(name)

    def delete_pool(self, name: bytes) -> None:
        if name not in self._pools:
            raise BadPoolError(f"no pool named {name!r}")
        del self._pools[name]

    def pool_info(self, pool: MapPool) -> dict:
        return pool.attributes()
