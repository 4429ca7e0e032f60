"""Point-to-point tuple streams over TCP.

One connection per operator edge.  The sender opens with a 25-byte
handshake (``GLTS``, version 1, 16-byte stream id, u32 schema id) and the
receiver answers with the same frame carrying what it expects.  Data then
flows as frames of a 4-byte big-endian length and the payload; a zero
length marks the end of the stream.
"""
from __future__ import annotations

import hashlib
import logging
import queue
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass

from .errors import SchemaMismatch, StreamClosed, StreamError

log = logging.getLogger(__name__)

MAGIC = b"GLTS"
VERSION = 1
HANDSHAKE = struct.Struct(">4sB16sI")
LENGTH = struct.Struct(">I")
MAX_FRAME = 1 << 20
QUEUE_SIZE = 10_000
BACKOFF_BASE = 0.1
BACKOFF_CAP = 5.0

_EOS = object()


def stream_id_for(query_id: str, edge: int) -> bytes:
    """16 bytes: a digest of the query id plus the edge index."""
    return hashlib.blake2b(query_id.encode(), digest_size=14).digest() + struct.pack(">H", edge)


def encode_handshake(stream_id: bytes, schema_id: int) -> bytes:
    if len(stream_id) != 16:
        raise ValueError("stream id must be 16 bytes")
    return HANDSHAKE.pack(MAGIC, VERSION, stream_id, schema_id)


def decode_handshake(buf: bytes) -> tuple[bytes, int]:
    magic, version, sid, schema_id = HANDSHAKE.unpack(buf)
    if magic != MAGIC or version != VERSION:
        raise StreamError(f"bad handshake magic/version {magic!r}/{version}")
    return sid, schema_id


def encode_frame(payload: bytes) -> bytes:
    return LENGTH.pack(len(payload)) + payload


def recv_exact(sock: socket.socket, n: int) -> bytes:
    """Read exactly n bytes; raises EOFError if the peer closes first."""
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EOFError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket, max_frame: int = MAX_FRAME) -> bytes | None:
    """One frame payload, or None for end-of-stream."""
    (n,) = LENGTH.unpack(recv_exact(sock, 4))
    if n == 0:
        return None
    if n > max_frame:
        raise StreamError(f"frame length {n} exceeds ceiling {max_frame}")
    try:
        return recv_exact(sock, n)
    except EOFError as exc:
        raise StreamError(f"truncated frame: {exc}") from exc


def backoff_delays(base: float = BACKOFF_BASE, cap: float = BACKOFF_CAP, rng=None):
    """Exponential backoff with full jitter."""
    rng = rng or random.Random()
    attempt = 0
    while True:
        yield rng.uniform(0, min(cap, base * (2 ** attempt)))
        attempt += 1


# -- receiving side ----------------------------------------------------------

class StreamReceiver:
    """Inbound end of one edge.  Frames arrive in order through ``recv``."""

    def __init__(self, stream_id: bytes, schema_id: int, queue_size: int = QUEUE_SIZE):
        self.stream_id = stream_id
        self.schema_id = schema_id
        self._q: queue.Queue = queue.Queue(maxsize=queue_size)
        self.received = 0
        self.errors: list[str] = []
        self.connections = 0
        self.ended = threading.Event()
        self.closed = False

    def _put(self, item) -> None:
        while not self.closed:
            try:
                self._q.put(item, timeout=0.2)
                return
            except queue.Full:
                continue

    def recv(self, timeout: float | None = None) -> bytes | None:
        """Next payload, None at end-of-stream; raises queue.Empty on timeout."""
        item = self._q.get(timeout=timeout)
        if item is _EOS:
            return None
        return item

    def close(self) -> None:
        self.closed = True


class StreamListener:
    """Accepts inbound connections on one port and routes them by stream id."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, max_frame: int = MAX_FRAME,
                 rcvbuf: int | None = None):
        self.max_frame = max_frame
        self.rcvbuf = rcvbuf
        self._streams: dict[bytes, StreamReceiver] = {}
        self._lock = threading.Lock()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        if rcvbuf:
            # must be set before listen() so the advertised window honours it
            self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, rcvbuf)
        self._sock.bind((host, port))
        self._sock.listen(64)
        self._sock.settimeout(0.2)
        self.address = self._sock.getsockname()[:2]
        self._stop = threading.Event()
        self._conns: set[socket.socket] = set()
        self._thread = threading.Thread(target=self._accept_loop, name=f"listener:{self.address[1]}",
                                        daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        return self.address[1]

    def open(self, stream_id: bytes, schema_id: int, queue_size: int = QUEUE_SIZE) -> StreamReceiver:
        with self._lock:
            existing = self._streams.get(stream_id)
            if existing is not None and not existing.closed:
                return existing
            rx = StreamReceiver(stream_id, schema_id, queue_size)
            self._streams[stream_id] = rx
            return rx

    def drop(self, stream_id: bytes) -> None:
        with self._lock:
            rx = self._streams.pop(stream_id, None)
        if rx is not None:
            rx.close()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        self._conns.add(conn)
        sid = None
        try:
            conn.settimeout(5.0)
            sid, schema_id = decode_handshake(recv_exact(conn, HANDSHAKE.size))
            with self._lock:
                rx = self._streams.get(sid)
            if rx is None or rx.closed:
                return  # unknown stream: close, the sender will retry
            conn.sendall(encode_handshake(sid, rx.schema_id))
            if schema_id != rx.schema_id:
                rx.errors.append(f"schema mismatch: expected {rx.schema_id}, got {schema_id}")
                return
            rx.connections += 1
            conn.settimeout(None)
            while not rx.closed and not self._stop.is_set():
                payload = read_frame(conn, self.max_frame)
                if payload is None:
                    rx.ended.set()
                    rx._put(_EOS)
                    return
                rx.received += 1
                rx._put(payload)
        except EOFError:
            pass  # peer went away; at-most-once, it may reconnect
        except (StreamError, OSError, struct.error) as exc:
            log.debug("inbound stream error: %s", exc)
            with self._lock:
                rx = self._streams.get(sid)
            if rx is not None:
                rx.errors.append(str(exc))
        finally:
            self._conns.discard(conn)
            conn.close()

    def close(self) -> None:
        self._stop.set()
        self._sock.close()
        for c in list(self._conns):
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        with self._lock:
            for rx in self._streams.values():
                rx.close()


# -- sending side --------------------------------------------------------------

@dataclass
class SenderStats:
    enqueued: int = 0
    sent: int = 0
    lost: int = 0
    connects: int = 0
    high_water: int = 0


class StreamSender:
    """Outbound end of one edge.

    ``send`` blocks while the local queue is full, which is how backpressure
    reaches the producer.  A background thread owns the socket, reconnects
    with jittered exponential backoff and follows ``reassign``.
    """

    def __init__(self, address, stream_id: bytes, schema_id: int, queue_size: int = QUEUE_SIZE,
                 sndbuf: int | None = None, backoff_base: float = BACKOFF_BASE,
                 backoff_cap: float = BACKOFF_CAP, batch: int = 256):
        self.address = tuple(address)
        self.stream_id = stream_id
        self.schema_id = schema_id
        self.queue_size = queue_size
        self.sndbuf = sndbuf
        self.backoff_base, self.backoff_cap = backoff_base, backoff_cap
        self.batch = batch
        self.stats = SenderStats()
        self.error: Exception | None = None
        self.connected = threading.Event()
        self._q: queue.Queue = queue.Queue(maxsize=queue_size)
        self._sock: socket.socket | None = None
        self._closing = False
        self._stop = threading.Event()
        self._done = threading.Event()
        self._addr_changed = threading.Event()
        self._in_send = False
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._run, name="sender", daemon=True)
        self._thread.start()

    # public -------------------------------------------------------------------
    def send(self, payload: bytes, timeout: float | None = None) -> None:
        if self.error is not None:
            raise self.error
        if self._closing or self._stop.is_set():
            raise StreamClosed("stream closed")
        if len(payload) == 0 or len(payload) > MAX_FRAME:
            raise StreamError(f"payload size {len(payload)} outside 1..{MAX_FRAME}")
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                wait = 0.2 if deadline is None else max(0.0, min(0.2, deadline - time.monotonic()))
                self._q.put(payload, timeout=wait)
                break
            except queue.Full:
                if self.error is not None:
                    raise self.error
                if self._stop.is_set():
                    raise StreamClosed("stream closed while waiting for queue space")
                if deadline is not None and time.monotonic() >= deadline:
                    raise
        self.stats.enqueued += 1
        depth = self._q.qsize()
        if depth > self.stats.high_water:
            self.stats.high_water = depth

    def depth(self) -> int:
        return self._q.qsize()

    def reassign(self, address) -> None:
        """Point the stream at a new peer; the current connection is dropped."""
        with self._lock:
            self.address = tuple(address)
            self._addr_changed.set()
            # an idle connection is swapped before the next batch; only a
            # send stuck on the old peer needs to be broken
            sock = self._sock if self._in_send else None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def close(self, timeout: float | None = 10.0) -> bool:
        """Flush queued frames, send end-of-stream and stop.  True if drained."""
        if not self._closing:
            self._closing = True
            while True:
                try:
                    self._q.put(_EOS, timeout=0.2)
                    break
                except queue.Full:
                    if self._done.is_set() or self.error is not None:
                        break
        ok = self._done.wait(timeout)
        if not ok:
            self.abort()
        return ok

    def abort(self) -> None:
        """Stop immediately; whatever is still queued counts as lost."""
        self._stop.set()
        with self._lock:
            sock = self._sock
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._done.wait(2.0)

    # worker thread ------------------------------------------------------------
    def _connect(self) -> socket.socket | None:
        delays = backoff_delays(self.backoff_base, self.backoff_cap)
        while not self._stop.is_set():
            with self._lock:
                addr = self.address
                self._addr_changed.clear()
            try:
                sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                if self.sndbuf:
                    sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, self.sndbuf)
                sock.settimeout(2.0)
                try:
                    sock.connect(addr)
                except OSError:
                    sock.close()
                    raise
                sock.sendall(encode_handshake(self.stream_id, self.schema_id))
                sid, schema_id = decode_handshake(recv_exact(sock, HANDSHAKE.size))
                if sid != self.stream_id or schema_id != self.schema_id:
                    sock.close()
                    raise SchemaMismatch(
                        f"peer expects schema {schema_id} on this stream, sender has {self.schema_id}")
                sock.settimeout(None)
                return sock
            except SchemaMismatch:
                raise
            except (OSError, EOFError, StreamError) as exc:
                log.debug("connect to %s failed: %s", addr, exc)
            # sleep with early wake-up when the address changes
            self._addr_changed.wait(next(delays))
        return None

    def _run(self) -> None:
        pending: list = []
        try:
            while not self._stop.is_set():
                try:
                    sock = self._connect()
                except SchemaMismatch as exc:
                    self.error = exc
                    return
                if sock is None:
                    return
                with self._lock:
                    self._sock = sock
                self.stats.connects += 1
                self.connected.set()
                try:
                    while not self._stop.is_set():
                        if not pending:
                            try:
                                pending.append(self._q.get(timeout=0.2))
                            except queue.Empty:
                                continue
                            while len(pending) < self.batch:
                                try:
                                    pending.append(self._q.get_nowait())
                                except queue.Empty:
                                    break
                        eos = pending and pending[-1] is _EOS
                        data = [p for p in pending if p is not _EOS]
                        buf = b"".join(encode_frame(p) for p in data)
                        if eos:
                            buf += LENGTH.pack(0)
                        with self._lock:
                            if self._addr_changed.is_set():
                                break
                            self._in_send = True
                        try:
                            sock.sendall(buf)
                        finally:
                            with self._lock:
                                self._in_send = False
                        self.stats.sent += len(data)
                        pending = []
                        if eos:
                            sock.shutdown(socket.SHUT_WR)
                            try:
                                sock.recv(1)
                            except OSError:
                                pass
                            return
                except OSError as exc:
                    # frames handed to the dead connection are gone (at-most-once)
                    n = len([p for p in pending if p is not _EOS])
                    self.stats.lost += n
                    pending = [p for p in pending if p is _EOS]
                    log.debug("stream to %s broke (%s); %d frames lost", self.address, exc, n)
                finally:
                    self.connected.clear()
                    with self._lock:
                        self._sock = None
                    sock.close()
        finally:
            if self._stop.is_set():
                # whatever was queued when we were aborted never made it
                n = len([p for p in pending if p is not _EOS])
                while True:
                    try:
                        if self._q.get_nowait() is not _EOS:
                            n += 1
                    except queue.Empty:
                        break
                self.stats.lost += n
            self._done.set()


def open_stream(address, stream_id: bytes, schema_id: int, timeout: float = 10.0, **kw) -> StreamSender:
    """Connect a sender and wait until the handshake succeeded."""
    s = StreamSender(address, stream_id, schema_id, **kw)
    deadline = time.monotonic() + timeout
    while not s.connected.wait(0.05):
        if s.error is not None:
            s.abort()
            raise s.error
        if time.monotonic() > deadline:
            s.abort()
            raise StreamError(f"could not reach {address} within {timeout}s")
    return s
