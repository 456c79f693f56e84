"""Key hashing.

A keyed blake2b truncated to 64 bits: avalanche quality comes from the
underlying hash, the fixed key pins results across runs and processes so
bucket placement is reproducible in tests and after restart.
"""

import hashlib

_SEED = b"mcaslite00"


def hash64(data: bytes) -> int:
    return int.from_bytes(
        hashlib.blake2b(data, digest_size=8, key=_SEED).digest(), "little")
