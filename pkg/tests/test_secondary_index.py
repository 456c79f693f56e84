import random

import pytest

from mcaslite.errors import BadRegexError, NoMatchError
from mcaslite.secondary_index import (
    MATCH_EXACT,
    MATCH_PREFIX,
    MATCH_REGEX,
    SecondaryIndex,
)


def test_prefix_scan_in_order():
    index = SecondaryIndex([b"car", b"cart", b"dog"])
    key, pos = index.find(b"car", MATCH_PREFIX)
    assert key == b"car"
    key, pos = index.find(b"car", MATCH_PREFIX, pos)
    assert key == b"cart"
    with pytest.raises(NoMatchError):
        index.find(b"car", MATCH_PREFIX, pos)


def test_exact_and_regex():
    index = SecondaryIndex([b"car", b"cart", b"dog"])
    assert index.find(b"dog", MATCH_EXACT)[0] == b"dog"
    assert index.find(b"c.*t", MATCH_REGEX)[0] == b"cart"
    with pytest.raises(BadRegexError):
        index.find(b"c[", MATCH_REGEX)
    with pytest.raises(BadRegexError):
        index.find(b"x", 99)


def test_bulk_load_equals_sorted():
    keys = [b"k%03d" % i for i in range(50)]
    random.Random(1).shuffle(keys)
    index = SecondaryIndex(keys)
    assert index.keys() == sorted(keys)


def test_scan_never_skips_or_repeats_under_mutation():
    rng = random.Random(7)
    keys = sorted({rng.randbytes(4) for _ in range(200)} - {b""})
    index = SecondaryIndex(keys)
    seen = []
    pos = b""
    while True:
        try:
            key, pos = index.find(b"", MATCH_PREFIX, pos)
        except NoMatchError:
            break
        seen.append(key)
        # interleaved mutations: deletions behind, insertions anywhere
        if rng.random() < 0.3:
            index.discard(rng.choice(keys))
        if rng.random() < 0.3:
            index.add(rng.randbytes(4) or b"x")
    assert seen == sorted(set(seen)), "scan out of order or repeated"


def test_index_tracks_primary_set():
    rng = random.Random(3)
    index = SecondaryIndex()
    model = set()
    for _ in range(2000):
        key = b"k%03d" % rng.randrange(300)
        if rng.random() < 0.5:
            index.add(key)
            model.add(key)
        else:
            index.discard(key)
            model.discard(key)
    assert index.keys() == sorted(model)
