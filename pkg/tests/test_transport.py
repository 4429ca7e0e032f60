import queue
import socket
import statistics
import struct
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgestream.errors import SchemaMismatch, StreamClosed, StreamError
from edgestream.transport import (
    HANDSHAKE, StreamListener, StreamSender, backoff_delays, decode_handshake, encode_frame,
    encode_handshake, open_stream, read_frame, stream_id_for,
)

SID = stream_id_for("q-transport", 0)


def seq(i: int) -> bytes:
    return struct.pack(">Q", i) + b"x" * (i % 13)


def drain(rx, timeout=10.0):
    out = []
    while True:
        item = rx.recv(timeout=timeout)
        if item is None:
            return out
        out.append(item)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_handshake_layout():
    hs = encode_handshake(SID, 0x01020304)
    assert len(hs) == HANDSHAKE.size == 25
    assert hs[:5] == b"GLTS\x01"
    assert hs[5:21] == SID
    assert hs[21:] == b"\x01\x02\x03\x04"
    assert decode_handshake(hs) == (SID, 0x01020304)
    with pytest.raises(StreamError):
        decode_handshake(b"XXXX" + hs[4:])


def test_stream_ids_are_distinct_per_edge():
    ids = {stream_id_for(f"q{i}", e) for i in range(50) for e in range(4)}
    assert len(ids) == 200 and all(len(i) == 16 for i in ids)


def test_full_dataset_in_order_without_duplicates():
    lst = StreamListener()
    rx = lst.open(SID, 1)
    tx = open_stream(lst.address, SID, 1)
    n = 45_312
    got = []
    t = threading.Thread(target=lambda: got.extend(drain(rx)))
    t.start()
    for i in range(n):
        tx.send(seq(i))
    assert tx.close()
    t.join(30)
    assert got == [seq(i) for i in range(n)]
    assert tx.stats.sent == n and tx.stats.lost == 0
    assert rx.ended.is_set()
    lst.close()


def test_schema_mismatch_is_fatal_and_exchanges_nothing():
    lst = StreamListener()
    rx = lst.open(SID, 1)
    with pytest.raises(SchemaMismatch):
        open_stream(lst.address, SID, 2, timeout=5)
    time.sleep(0.1)
    assert rx.received == 0
    assert any("mismatch" in e for e in rx.errors)
    lst.close()


def test_peer_comes_up_late_no_duplicates():
    port = free_port()
    tx = StreamSender(("127.0.0.1", port), SID, 1, backoff_base=0.05, backoff_cap=0.2)
    for i in range(100):
        tx.send(seq(i))
    time.sleep(0.4)
    assert not tx.connected.is_set()
    lst = StreamListener(port=port)
    rx = lst.open(SID, 1)
    assert tx.close()
    assert drain(rx) == [seq(i) for i in range(100)]
    assert tx.stats.connects == 1
    lst.close()


def test_unknown_stream_is_retried_until_opened():
    lst = StreamListener()
    tx = StreamSender(lst.address, SID, 1, backoff_base=0.02, backoff_cap=0.1)
    tx.send(b"hello")
    time.sleep(0.3)
    rx = lst.open(SID, 1)
    assert tx.close()
    assert drain(rx) == [b"hello"]
    lst.close()


def raw_client(address, sid=SID, schema_id=1):
    s = socket.create_connection(address)
    s.sendall(encode_handshake(sid, schema_id))
    s.recv(HANDSHAKE.size)
    return s


def test_oversize_frame_closes_connection():
    lst = StreamListener(max_frame=1024)
    rx = lst.open(SID, 1)
    s = raw_client(lst.address)
    s.sendall(struct.pack(">I", 1025) + b"z" * 1025)
    s.settimeout(2)
    try:
        assert s.recv(1) == b""  # closed by the receiver
    except ConnectionResetError:
        pass  # unread bytes turn the close into a reset
    s.close()
    time.sleep(0.05)
    assert any("ceiling" in e for e in rx.errors)
    assert rx.received == 0
    lst.close()


def test_truncated_frame_is_a_stream_error():
    lst = StreamListener()
    rx = lst.open(SID, 1)
    s = raw_client(lst.address)
    s.sendall(encode_frame(b"ok") + struct.pack(">I", 10) + b"abc")
    s.close()
    assert rx.recv(timeout=2) == b"ok"
    deadline = time.time() + 2
    while not rx.errors and time.time() < deadline:
        time.sleep(0.01)
    assert any("truncated" in e for e in rx.errors)
    lst.close()


def test_end_of_stream_and_send_after_close():
    lst = StreamListener()
    rx = lst.open(SID, 1)
    tx = open_stream(lst.address, SID, 1)
    tx.send(b"a")
    tx.close()
    assert drain(rx) == [b"a"]
    with pytest.raises(StreamClosed):
        tx.send(b"b")
    lst.close()


def test_bounded_queue_under_adversarial_producer():
    lst = StreamListener(rcvbuf=4096)
    lst.open(SID, 1, queue_size=10)
    tx = open_stream(lst.address, SID, 1, queue_size=50, sndbuf=4096)
    stop = threading.Event()

    def hammer():
        i = 0
        while not stop.is_set():
            try:
                tx.send(seq(i) * 20, timeout=0.1)
                i += 1
            except queue.Full:
                pass

    t = threading.Thread(target=hammer)
    t.start()
    samples = []
    for _ in range(30):
        samples.append(tx.depth())
        time.sleep(0.01)
    stop.set()
    t.join()
    assert max(samples) <= 50 and tx.stats.high_water <= 50
    assert max(samples) >= 45  # the producer was actually held back
    tx.abort()
    lst.close()


def measure_backpressure(consumer_rate=400.0, warmup=2.0, window=5.0, queue_size=20, size=256):
    """Producer pushes flat out into a consumer throttled to ``consumer_rate``.

    Rates are least-squares slopes of the running counts sampled every 10 ms,
    which irons out the burstiness of batched socket writes.
    """
    lst = StreamListener(rcvbuf=4096)
    rx = lst.open(SID, 1, queue_size=queue_size)
    tx = open_stream(lst.address, SID, 1, queue_size=queue_size, sndbuf=4096)
    stop = threading.Event()
    produced = [0]
    consumed = [0]

    def produce():
        i = 0
        while not stop.is_set():
            try:
                tx.send(seq(i).ljust(size, b"."), timeout=0.1)
            except queue.Full:
                continue
            i += 1
            produced[0] = i

    def consume():
        start = time.monotonic()
        while not stop.is_set():
            try:
                rx.recv(timeout=0.1)
            except queue.Empty:
                continue
            consumed[0] += 1
            delay = start + consumed[0] / consumer_rate - time.monotonic()
            if delay > 0:
                time.sleep(delay)

    threads = [threading.Thread(target=produce), threading.Thread(target=consume)]
    for t in threads:
        t.start()
    time.sleep(warmup)
    ts, ps, cs = [], [], []
    end = time.monotonic() + window
    while time.monotonic() < end:
        ts.append(time.monotonic())
        ps.append(produced[0])
        cs.append(consumed[0])
        time.sleep(0.01)
    stop.set()
    for t in threads:
        t.join()
    tx.abort()
    lst.close()
    return (statistics.linear_regression(ts, ps).slope,
            statistics.linear_regression(ts, cs).slope)


def test_backpressure_converges_to_consumer_rate():
    producer_rate, consumer_rate = measure_backpressure()
    assert consumer_rate == pytest.approx(400, rel=0.05)
    assert abs(producer_rate - consumer_rate) <= 0.05 * consumer_rate


def test_reassign_moves_the_stream():
    a, b = StreamListener(), StreamListener()
    rx_a, rx_b = a.open(SID, 1), b.open(SID, 1)
    tx = open_stream(a.address, SID, 1, backoff_base=0.02)
    for i in range(10):
        tx.send(seq(i))
    deadline = time.time() + 5
    while rx_a.received < 10 and time.time() < deadline:
        time.sleep(0.01)
    tx.reassign(b.address)
    for i in range(10, 20):
        tx.send(seq(i))
    tx.close()
    assert drain(rx_b) == [seq(i) for i in range(10, 20)]
    assert [rx_a.recv(timeout=1) for _ in range(10)] == [seq(i) for i in range(10)]
    a.close()
    b.close()


def test_backoff_is_capped_and_jittered():
    import random
    d = backoff_delays(0.1, 5.0, random.Random(3))
    delays = [next(d) for _ in range(20)]
    assert all(0 <= x <= 5.0 for x in delays)
    assert all(x <= 0.1 * 2 ** i for i, x in enumerate(delays))
    assert len(set(delays)) == 20


@settings(max_examples=60, deadline=None)
@given(st.lists(st.binary(min_size=1, max_size=300), max_size=40))
def test_frames_round_trip_over_a_socket(payloads):
    a, b = socket.socketpair()
    a.sendall(b"".join(encode_frame(p) for p in payloads) + struct.pack(">I", 0))
    got = []
    while (p := read_frame(b)) is not None:
        got.append(p)
    assert got == payloads
    a.close()
    b.close()
