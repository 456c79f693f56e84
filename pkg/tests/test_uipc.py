import threading

import pytest

from mcaslite import uipc


def test_fifo_order_inproc():
    a, b = uipc.create_inproc()
    for i in range(10000):
        a.send(1, b"%d" % i)
        got = b.recv(timeout=1)
        assert got == (1, b"%d" % i)


def test_queue_full_bounded():
    a, b = uipc.create_inproc()
    pushed = 0
    while a.try_send(2, b"x"):
        pushed += 1
    assert pushed == uipc.SLOTS
    assert not a.try_send(2, b"x")
    assert b.try_recv() == (2, b"x")
    assert a.try_send(2, b"x")  # slot freed


def test_oversize_payload_spills_to_scratch():
    a, b = uipc.create_inproc()
    big = bytes(range(256)) * 4096  # 1 MiB
    a.send(3, big)
    kind, payload = b.recv(timeout=1)
    assert kind == 3 and payload == big


def test_payload_above_scratch_rejected():
    a, _b = uipc.create_inproc()
    with pytest.raises(uipc.QueueFull):
        a.send(1, bytes(uipc.SCRATCH + 1))


def test_concurrent_producer_consumer_no_loss():
    a, b = uipc.create_inproc()
    n = 20000
    received = []

    def consume():
        while len(received) < n:
            got = b.recv(timeout=5)
            assert got is not None, "consumer starved"
            received.append(got[1])

    thread = threading.Thread(target=consume)
    thread.start()
    for i in range(n):
        a.send(1, i.to_bytes(4, "little"))
    thread.join(timeout=30)
    assert not thread.is_alive()
    assert received == [i.to_bytes(4, "little") for i in range(n)]


def test_bidirectional_independent():
    a, b = uipc.create_inproc()
    a.send(1, b"ping")
    b.send(2, b"pong")
    assert b.recv(timeout=1) == (1, b"ping")
    assert a.recv(timeout=1) == (2, b"pong")


def test_shared_memory_segment_cross_handles():
    name = uipc.segment_name(0, 999)
    shard_side = uipc.create_shared(name)
    try:
        host_side = uipc.attach_shared(name, foreign=False)
        shard_side.send(1, b"over shm")
        assert host_side.recv(timeout=1) == (1, b"over shm")
        host_side.send(2, b"back")
        assert shard_side.recv(timeout=1) == (2, b"back")
        host_side.close()
    finally:
        shard_side.close()
