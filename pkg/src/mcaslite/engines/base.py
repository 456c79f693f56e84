"""Common storage-engine interface.

Every backend (hstore, hstore-cc, mapstore) exposes the same pool and
key-value operations and passes the same conformance suite against an
in-memory model map.  Values are capped at 1 GiB.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Iterator, Optional

from ..errors import TooLargeError

VALUE_MAX = 1 << 30


def check_value_size(length: int) -> None:
    if length > VALUE_MAX:
        raise TooLargeError(f"value of {length} bytes exceeds 1 GiB cap")


class Pool(ABC):
    """One pool's key-value operations, driven by a single shard thread."""

    pool_id: int
    name: bytes

    @abstractmethod
    def put(self, key: bytes, value: bytes, no_overwrite: bool = False) -> None: ...

    @abstractmethod
    def get(self, key: bytes) -> bytes: ...

    @abstractmethod
    def erase(self, key: bytes) -> None: ...

    @abstractmethod
    def resize_value(self, key: bytes, new_size: int) -> None: ...

    @abstractmethod
    def count(self) -> int: ...

    @abstractmethod
    def keys(self) -> Iterator[bytes]: ...

    @abstractmethod
    def attributes(self, key: Optional[bytes] = None) -> dict: ...

    def value_descriptor(self, key: bytes, min_size: int = 0,
                         create: bool = False) -> tuple[int, int, bool]:
        """(pool-space offset, length, newly_created) of a key's value,
        forced out-of-line so plugins can address it.  Arena-backed pools
        only."""
        raise NotImplementedError("backend does not expose pool memory")

    def write_value_slice(self, key: bytes, offset: int, data: bytes) -> None:
        raise NotImplementedError

    def read_value_slice(self, key: bytes, offset: int, length: int) -> bytes:
        raise NotImplementedError


class StoreBackend(ABC):
    """Per-shard engine: owns pools and their storage."""

    kind: str

    @abstractmethod
    def create_pool(self, name: bytes, size: int) -> Pool: ...

    @abstractmethod
    def open_pool(self, name: bytes) -> Optional[Pool]: ...

    @abstractmethod
    def delete_pool(self, name: bytes) -> None: ...

    @abstractmethod
    def pool_info(self, pool: Pool) -> dict: ...

    def close(self) -> None:
        pass
