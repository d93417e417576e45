"""The same job over loopback TCP, one connection per worker.

Chunk frame: ``len:u32 target:u8 data[len]`` (``len == 0`` terminates the
session).  The reply to every data frame is the count as a bare ``u64``.
"""

from __future__ import annotations

import socket
import struct
import time

from .harness import JobReport, JobSpec, WorkerStats, run_rounds

_CHUNK = struct.Struct("<IB")
_REPLY = struct.Struct("<Q")
DEFAULT_HOST = "127.0.0.1"


def encode_chunk(data, target: int) -> bytes:
    return _CHUNK.pack(len(data), target) + bytes(data)


def _recv_into_exact(sock: socket.socket, view: memoryview) -> None:
    got = 0
    while got < len(view):
        n = sock.recv_into(view[got:])
        if n == 0:
            raise ConnectionError(f"peer closed after {got} of {len(view)} bytes")
        got += n


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    _recv_into_exact(sock, memoryview(buf))
    return bytes(buf)


def listen_tcp(endpoint: tuple[str, int]) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(endpoint)
    srv.listen(1)
    return srv


def serve_tcp_worker(conn: socket.socket, *, iters: int = 1) -> WorkerStats:
    """Answer chunk frames on an accepted connection until ``len == 0``."""
    stats = WorkerStats()
    cpu0, wall0 = time.process_time(), time.perf_counter()
    buf = bytearray(1 << 16)
    head = memoryview(bytearray(_CHUNK.size))
    while True:
        _recv_into_exact(conn, head)
        length, target = _CHUNK.unpack(head)
        if length == 0:
            break
        if length > len(buf):
            buf = bytearray(length)
        _recv_into_exact(conn, memoryview(buf)[:length])
        count = 0
        for _ in range(max(1, iters)):
            count = buf.count(target, 0, length)
        conn.sendall(_REPLY.pack(count))
        stats.rounds += 1
    stats.cpu_time = time.process_time() - cpu0
    stats.wall_time = time.perf_counter() - wall0
    return stats


def run_tcp_worker(endpoint: tuple[str, int], *, iters: int = 1, timeout: float = 30.0,
                   listener: socket.socket | None = None) -> WorkerStats:
    srv = listener or listen_tcp(endpoint)
    srv.settimeout(timeout)
    try:
        conn, _ = srv.accept()
    finally:
        srv.close()
    conn.settimeout(None)
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    with conn:
        return serve_tcp_worker(conn, iters=iters)


def connect_tcp(endpoint: tuple[str, int], timeout: float = 30.0) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection(endpoint, timeout=timeout)
            break
        except ConnectionRefusedError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.005)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


class TcpSession:
    """Manager-side connections to every worker, in worker-id order."""

    def __init__(self, endpoints, *, timeout: float = 30.0):
        self.socks = []
        try:
            for ep in endpoints:
                self.socks.append(connect_tcp(ep, timeout))
        except BaseException:
            self.close()
            raise

    def buffer_sizes(self) -> tuple[int, int]:
        s = self.socks[0]
        return (s.getsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF),
                s.getsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF))

    def terminate(self) -> None:
        for s in self.socks:
            try:
                s.sendall(_CHUNK.pack(0, 0))
            except OSError:
                pass

    def close(self) -> None:
        for s in self.socks:
            s.close()
        self.socks = []


def run_tcp_mapper(spec: JobSpec, worker_endpoints=None, *, chunk_size: int,
                   session: TcpSession | None = None, terminate: bool = True) -> JobReport:
    """Striped job over TCP with the same schedule and timing as shm.

    ``chunk_size`` plays the role of the slice payload capacity.  Pass an open
    ``session`` to keep the connections after the job (for measurements
    taken before the workers are told to stop).
    """
    own = session is None
    if own:
        session = TcpSession(worker_endpoints)
    socks = session.socks
    if len(socks) != spec.num_workers:
        raise ValueError(f"{len(socks)} connections for {spec.num_workers} workers")

    pending: list[int] = []

    def copy_one(j, view):
        if not len(view):
            return  # a zero-length frame would end the session; the count is 0
        sock = socks[j - 1]
        sock.sendall(_CHUNK.pack(len(view), spec.target_byte))
        sock.sendall(view)

    def publish_all(lengths):
        # the send itself is the announcement
        pending[:] = [j for j, length in lengths if length]

    def await_all():
        out = [(j, 0) for j in range(1, len(socks) + 1)]
        for j in pending:
            out[j - 1] = (j, _REPLY.unpack(_recv_exact(socks[j - 1], _REPLY.size))[0])
        return out

    try:
        report = run_rounds(spec, chunk_size, copy_one, publish_all, await_all)
    finally:
        if terminate:
            session.terminate()
        if own:
            session.close()
    return report
