"""Central doorbell distributor, kept as the boot-time baseline.

Every peer connects to one distributor process, which hands out ids and then
relays every peer's doorbell to every other peer.  Each record on the wire
is an 8-byte little-endian signed id with descriptors in SCM_RIGHTS:

* ``id >= 0``: a peer id plus that peer's doorbell.  The first record a peer
  receives is its own id and its own doorbell.
* ``id == -1``: the region announcement.  A worker gets only its own slice;
  peer 0 (the manager) gets every slice.

For P peers the distributor sends exactly P**2 + P records.
"""

from __future__ import annotations

import os
import socket
import struct
import time
from dataclasses import dataclass, field

from .errors import ClosedError, DecodeError, ProtocolError, Timeout
from .handshake import DEFAULT_TIMEOUT, connect_unix, listen_unix
from .region import ManagerRegion
from .signaling import Doorbell, create_doorbell

REGION_ID = -1
_REC = struct.Struct("<q")


def expected_records(peers: int) -> int:
    return peers * peers + peers


def send_record(sock: socket.socket, peer_id: int, fds=()) -> None:
    data = _REC.pack(peer_id)
    if fds:
        sent = socket.send_fds(sock, [data], list(fds))
        if sent != len(data):
            sock.sendall(data[sent:])
    else:
        sock.sendall(data)


def recv_record(sock: socket.socket, max_fds: int = 256) -> tuple[int, list[int]]:
    buf = b""
    fds: list[int] = []
    try:
        while len(buf) < _REC.size:
            chunk, got, flags, _ = socket.recv_fds(sock, _REC.size - len(buf), max_fds)
            fds.extend(got)
            if flags & socket.MSG_CTRUNC:
                raise ProtocolError("descriptor list truncated")
            if not chunk:
                if not buf:
                    raise ClosedError("distributor closed the connection")
                raise DecodeError(f"short record: {len(buf)} of {_REC.size} bytes")
            buf += chunk
    except socket.timeout as exc:
        _close_all(fds)
        raise Timeout("timed out waiting for a peer record") from exc
    except BaseException:
        _close_all(fds)
        raise
    (peer_id,) = _REC.unpack(buf)
    return peer_id, fds


def _close_all(fds) -> None:
    for fd in fds:
        try:
            os.close(fd)
        except OSError:
            pass


def run_distributor(endpoint: str, expected_peers: int, region: ManagerRegion, *,
                    timeout: float = DEFAULT_TIMEOUT, listener: socket.socket | None = None) -> int:
    """Serve ``expected_peers`` joins one at a time; returns records sent."""
    if expected_peers != region.geometry.num_slices:
        raise ValueError(f"{expected_peers} peers but the region has {region.geometry.num_slices} slices")
    srv = listener or listen_unix(endpoint, backlog=max(128, expected_peers))
    conns: list[socket.socket] = []
    bells: list[Doorbell] = []
    records = 0
    try:
        for p in range(expected_peers):
            srv.settimeout(timeout)
            try:
                conn, _ = srv.accept()
            except socket.timeout as exc:
                raise Timeout(f"only {p} of {expected_peers} peers joined within {timeout}s") from exc
            conn.settimeout(timeout)
            bell = create_doorbell(f"peer {p}")
            send_record(conn, p, [bell.fd])
            region_fds = region.descriptors if p == 0 else [region.slice(p).fd]
            send_record(conn, REGION_ID, region_fds)
            records += 2
            for q, (qconn, qbell) in enumerate(zip(conns, bells)):
                send_record(conn, q, [qbell.fd])
                records += 1
            for qconn in conns:
                send_record(qconn, p, [bell.fd])
                records += 1
            conns.append(conn)
            bells.append(bell)
    finally:
        for c in conns:
            c.close()
        for b in bells:
            b.close()
        srv.close()
        if listener is None:
            try:
                os.unlink(endpoint)
            except FileNotFoundError:
                pass
    return records


@dataclass
class PeerTable:
    own_id: int
    own_doorbell: Doorbell
    slice_fds: list[int]
    peers: dict[int, Doorbell] = field(default_factory=dict)
    expected_peers: int = 0

    @property
    def complete(self) -> bool:
        return len(self.peers) + 1 == self.expected_peers

    @property
    def known_ids(self) -> list[int]:
        return sorted([self.own_id, *self.peers])

    def close(self) -> None:
        self.own_doorbell.close()
        for b in self.peers.values():
            b.close()
        _close_all(self.slice_fds)
        self.slice_fds = []


class PeerSession:
    """Client side of the distributor exchange, split so callers can act
    between learning their id and the table filling up."""

    def __init__(self, endpoint: str, expected_peers: int, *, timeout: float = DEFAULT_TIMEOUT):
        self.endpoint = endpoint
        self.expected_peers = expected_peers
        self.timeout = timeout
        self.sock: socket.socket | None = None
        self.table: PeerTable | None = None

    def join(self) -> PeerTable:
        sock = connect_unix(self.endpoint, self.timeout)
        sock.settimeout(self.timeout)
        self.sock = sock
        try:
            own_id, fds = recv_record(sock)
            if own_id < 0 or len(fds) != 1:
                _close_all(fds)
                raise ProtocolError(f"first record must be own id with one doorbell, got id {own_id}")
            own = Doorbell(fds[0], direction=f"peer {own_id}")
            rid, sfds = recv_record(sock)
            if rid != REGION_ID or not sfds:
                _close_all(sfds)
                own.close()
                raise ProtocolError(f"second record must announce the region, got id {rid}")
        except BaseException:
            sock.close()
            raise
        self.table = PeerTable(own_id, own, sfds, expected_peers=self.expected_peers)
        return self.table

    def complete(self) -> PeerTable:
        table = self.table
        try:
            while not table.complete:
                pid, fds = recv_record(self.sock)
                if pid == REGION_ID:
                    _close_all(fds)
                    raise ProtocolError("region announced twice")
                if pid < 0 or len(fds) != 1:
                    _close_all(fds)
                    raise ProtocolError(f"peer record {pid} must carry exactly one doorbell")
                if pid == table.own_id or pid in table.peers:
                    _close_all(fds)
                    raise ProtocolError(f"duplicate record for peer {pid}")
                table.peers[pid] = Doorbell(fds[0], direction=f"peer {pid}")
        except BaseException:
            table.close()
            raise
        finally:
            self.sock.close()
        return table


def peer_register(endpoint: str, expected_peers: int, *, timeout: float = DEFAULT_TIMEOUT) -> PeerTable:
    session = PeerSession(endpoint, expected_peers, timeout=timeout)
    session.join()
    return session.complete()


def booted_at() -> int:
    """Monotonic timestamp shared by all processes on the host, in ns."""
    return time.monotonic_ns()
