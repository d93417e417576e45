import itertools
import os
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from shmslice.distributor import (
    REGION_ID,
    PeerSession,
    expected_records,
    recv_record,
    run_distributor,
    send_record,
)
from shmslice.errors import ClosedError, ProtocolError
from shmslice.handshake import connect_unix, listen_unix
from shmslice.region import RegionConfig, create_region
from shmslice.signaling import create_doorbell


@pytest.mark.parametrize("peers,records", [(1, 2), (2, 6), (4, 20), (33, 1122)])
def test_record_law(peers, records):
    assert expected_records(peers) == records


class Dist:
    def __init__(self, endpoint, peers):
        self.region = create_region(RegionConfig(peers * 16384, peers - 1)) if peers > 1 else None
        self.listener = listen_unix(endpoint)
        self.records = None
        self.error = None
        self._t = threading.Thread(target=self._run, args=(endpoint, peers), daemon=True)
        self._t.start()

    def _run(self, endpoint, peers):
        try:
            self.records = run_distributor(endpoint, peers, self.region, timeout=10, listener=self.listener)
        except Exception as exc:
            self.error = exc

    def join(self):
        self._t.join(30)
        if self.region is not None:
            self.region.destroy()
        if self.error:
            raise self.error
        return self.records


def _drain(endpoint):
    """Raw client: read records until the distributor hangs up."""
    sock = connect_unix(endpoint, 5)
    got = []
    try:
        while True:
            pid, fds = recv_record(sock)
            got.append((pid, len(fds)))
            for fd in fds:
                os.close(fd)
    except ClosedError:
        pass
    sock.close()
    return got


def test_single_peer_gets_two_records(sock_path):
    region = create_region(RegionConfig(1 << 20, 1))
    listener = listen_unix(sock_path)
    # one peer, but the region has two slices; drive the loop by hand
    out = {}
    t = threading.Thread(target=lambda: out.setdefault("r", _drain(sock_path)))
    t.start()
    conn, _ = listener.accept()
    bell = create_doorbell()
    send_record(conn, 0, [bell.fd])
    send_record(conn, REGION_ID, region.descriptors)
    conn.close()
    t.join(5)
    assert out["r"] == [(0, 1), (REGION_ID, 2)]
    region.destroy()


def test_per_peer_record_counts(sock_path):
    peers = 4
    d = Dist(sock_path, peers)
    seen = [None] * peers
    threads = []
    for p in range(peers):
        t = threading.Thread(target=lambda p=p: seen.__setitem__(p, _drain(sock_path)))
        t.start()
        threads.append(t)
        time.sleep(0.05)  # fix the arrival order
    for t in threads:
        t.join(20)
    assert d.join() == expected_records(peers)
    for p, recs in enumerate(seen):
        assert len(recs) == peers + 1
        assert recs[0] == (p, 1)
        assert recs[1] == (REGION_ID, peers if p == 0 else 1)
        assert sorted(pid for pid, _ in recs[2:]) == [q for q in range(peers) if q != p]
    assert sum(map(len, seen)) == expected_records(peers)


def _fake_distributor(endpoint, script):
    srv = listen_unix(endpoint)

    def run():
        conn, _ = srv.accept()
        for pid in script:
            bell = create_doorbell()
            send_record(conn, pid, [bell.fd])
            bell.close()
        time.sleep(0.2)
        conn.close()
        srv.close()

    t = threading.Thread(target=run, daemon=True)
    t.start()
    return t


def test_region_announced_twice(sock_path):
    t = _fake_distributor(sock_path, [1, REGION_ID, REGION_ID])
    s = PeerSession(sock_path, 3, timeout=5)
    s.join()
    with pytest.raises(ProtocolError):
        s.complete()
    t.join(5)


def test_duplicate_peer(sock_path):
    t = _fake_distributor(sock_path, [1, REGION_ID, 0, 0])
    s = PeerSession(sock_path, 3, timeout=5)
    s.join()
    with pytest.raises(ProtocolError):
        s.complete()
    t.join(5)


def test_first_record_must_be_own_id(sock_path):
    t = _fake_distributor(sock_path, [REGION_ID])
    with pytest.raises(ProtocolError):
        PeerSession(sock_path, 2, timeout=5).join()
    t.join(5)


def _mesh(endpoint, peers, order):
    """Join ``peers`` sessions, starting them in ``order``; return the tables."""
    d = Dist(endpoint, peers)
    tables, errors = {}, []

    def go(tag):
        try:
            s = PeerSession(endpoint, peers, timeout=10)
            tables[tag] = s.join()
            s.complete()
        except Exception as exc:
            errors.append(exc)

    threads = []
    for tag in order:
        t = threading.Thread(target=go, args=(tag,))
        t.start()
        threads.append(t)
        time.sleep(0.01)
    for t in threads:
        t.join(20)
    records = d.join()
    assert not errors
    return records, tables


@settings(max_examples=8, deadline=None)
@given(st.integers(2, 5).flatmap(lambda p: st.permutations(range(p))))
def test_every_arrival_order_completes(tmp_path_factory, order):
    endpoint = str(tmp_path_factory.mktemp("d") / "dist.sock")
    peers = len(order)
    records, tables = _mesh(endpoint, peers, order)
    assert records == expected_records(peers)
    assert sorted(t.own_id for t in tables.values()) == list(range(peers))
    for t in tables.values():
        assert t.complete and t.known_ids == list(range(peers))
        t.close()


def test_mesh_doorbells_are_shared(sock_path):
    records, tables = _mesh(sock_path, 3, [0, 1, 2])
    by_id = {t.own_id: t for t in tables.values()}
    # peer 2 rings peer 0's doorbell; peer 0 sees it on its own copy
    for a, b in itertools.permutations(by_id, 2):
        by_id[a].peers[b].signal(a + 10)
        assert by_id[b].own_doorbell.wait(timeout=5) == a + 10
    for t in tables.values():
        t.close()
