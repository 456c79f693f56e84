"""Randomized model-equivalence driver shared by engine tests."""

import random

from mcaslite.errors import AlreadyExistsError, KeyNotFoundError


def run_model_trace(pool, ops: int, seed: int, key_space: int = 300,
                    value_max: int = 80, audit_every: int = 0,
                    audit_fn=None) -> dict[bytes, bytes]:
    """Drive random put/get/erase/resize against `pool`, mirroring into a
    dict and asserting identical outcomes; returns the final model."""
    rng = random.Random(seed)
    model: dict[bytes, bytes] = {}
    for n in range(ops):
        k = b"k%d" % rng.randrange(key_space)
        r = rng.random()
        if r < 0.45:
            v = rng.randbytes(rng.randrange(value_max))
            no_over = rng.random() < 0.1
            try:
                pool.put(k, v, no_overwrite=no_over)
            except AlreadyExistsError:
                assert no_over and k in model
            else:
                assert not (no_over and k in model), "no_overwrite ignored"
                model[k] = v
        elif r < 0.65:
            try:
                pool.erase(k)
            except KeyNotFoundError:
                assert k not in model
            else:
                assert k in model
                del model[k]
        elif r < 0.9:
            try:
                got = pool.get(k)
            except KeyNotFoundError:
                assert k not in model
            else:
                assert got == model[k]
        else:
            size = rng.randrange(1, value_max + 8)
            try:
                pool.resize_value(k, size)
            except KeyNotFoundError:
                assert k not in model
            else:
                old = model[k]
                model[k] = old[:size] if len(old) >= size \
                    else old + bytes(size - len(old))
        if audit_every and audit_fn and (n + 1) % audit_every == 0:
            contents = audit_fn()
            assert contents == model, "audit contents diverged from model"
    final = dict(pool.items())
    assert final == model, "final contents diverged from model"
    return model
