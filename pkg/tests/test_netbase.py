import socket
import struct
import threading

import pytest

from shmslice.harness import JobSpec
from shmslice.netbase import (
    DEFAULT_HOST,
    TcpSession,
    connect_tcp,
    encode_chunk,
    listen_tcp,
    run_tcp_mapper,
    run_tcp_worker,
    serve_tcp_worker,
)
from shmslice.stream import oracle_count


def _workers(n, iters=1):
    """Start ``n`` TCP workers on free ports; return endpoints, threads, stats."""
    endpoints, threads, stats = [], [], []
    for _ in range(n):
        srv = listen_tcp((DEFAULT_HOST, 0))
        ep = srv.getsockname()
        t = threading.Thread(target=lambda ep=ep, srv=srv: stats.append(
            run_tcp_worker(ep, iters=iters, timeout=10, listener=srv)), daemon=True)
        t.start()
        endpoints.append(ep)
        threads.append(t)
    return endpoints, threads, stats


def test_chunk_encoding():
    assert encode_chunk(b"abc", 0x61) == struct.pack("<IB", 3, 0x61) + b"abc"


def test_worker_counts_a_frame():
    a, b = socket.socketpair()
    out = {}
    t = threading.Thread(target=lambda: out.setdefault("s", serve_tcp_worker(b)))
    t.start()
    a.sendall(encode_chunk(b"abcabca", ord("a")))
    assert struct.unpack("<Q", a.recv(8))[0] == 3
    a.sendall(struct.pack("<IB", 0, 0))
    t.join(5)
    assert out["s"].rounds == 1


def test_short_read_is_connection_error():
    a, b = socket.socketpair()
    a.sendall(struct.pack("<IB", 100, 0x61) + b"a" * 10)
    a.close()
    with pytest.raises(ConnectionError):
        serve_tcp_worker(b)


def test_replies_in_frame_order():
    a, b = socket.socketpair()
    t = threading.Thread(target=serve_tcp_worker, args=(b,), daemon=True)
    t.start()
    for payload in (b"a", b"aa", b"aaa"):
        a.sendall(encode_chunk(payload, ord("a")))
    replies = [struct.unpack("<Q", a.recv(8, socket.MSG_WAITALL))[0] for _ in range(3)]
    assert replies == [1, 2, 3]
    a.sendall(struct.pack("<IB", 0, 0))
    t.join(5)


def test_terminate_only_session():
    endpoints, threads, stats = _workers(2)
    session = TcpSession(endpoints)
    session.terminate()
    session.close()
    for t in threads:
        t.join(5)
    assert [s.rounds for s in stats] == [0, 0]


@pytest.mark.parametrize("n,threads", [(1, 1), (3, 1), (3, 3)])
def test_tcp_job_matches_oracle(n, threads):
    endpoints, workers, stats = _workers(n)
    cap = 8192 - 64
    data = 7 * cap + 5
    report = run_tcp_mapper(JobSpec(data, n, seed=3, transport="tcp", mapper_threads=threads),
                            endpoints, chunk_size=cap)
    for t in workers:
        t.join(10)
    assert not report.aborted, report.error
    assert report.total_count == oracle_count(3, data, 0x61)


def test_connect_retries_until_listener(unused_port=None):
    probe = socket.socket()
    probe.bind((DEFAULT_HOST, 0))
    ep = probe.getsockname()
    probe.close()
    holder = {}

    def late():
        holder["srv"] = listen_tcp(ep)
        conn, _ = holder["srv"].accept()
        conn.close()

    threading.Timer(0.1, late).start()
    s = connect_tcp(ep, timeout=5)
    s.close()


def test_wrong_connection_count():
    endpoints, threads, _ = _workers(1)
    session = TcpSession(endpoints)
    with pytest.raises(ValueError):
        run_tcp_mapper(JobSpec(10, 2, transport="tcp"), chunk_size=100, session=session)
    session.terminate()
    session.close()
