"""Distributor-free startup exchange over a local stream socket.

Wire format, little-endian throughout::

    frame   := len:u32  type:u8  payload[len - 1]
    Hello   (0x01)  proto_version:u16 flags:u16
    Welcome (0x02)  proto_version:u16 reserved:u16 assigned_id:u32
                    num_workers:u32 total_shm_size:u64 slice_size:u64
    Ready   (0x03)  assigned_id:u32 status:u32

Welcome carries three descriptors in SCM_RIGHTS, in order: the worker's slice
object, the manager->worker doorbell and the worker->manager doorbell.
"""

from __future__ import annotations

import logging
import os
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Union

from .errors import ClosedError, DecodeError, ProtocolError, ShmSliceError, Timeout
from .region import ManagerRegion, WorkerSlice, attach_slice, compute_geometry
from .signaling import Doorbell, create_doorbell

log = logging.getLogger(__name__)

PROTO_VERSION = 1
DEFAULT_TIMEOUT = 30.0
MAX_FRAME = 4096

_LEN = struct.Struct("<I")


@dataclass(frozen=True)
class Hello:
    TYPE = 0x01
    FORMAT = struct.Struct("<HH")
    proto_version: int = PROTO_VERSION
    flags: int = 0

    def fields(self):
        return (self.proto_version, self.flags)


@dataclass(frozen=True)
class Welcome:
    TYPE = 0x02
    FORMAT = struct.Struct("<HHIIQQ")
    proto_version: int
    reserved: int
    assigned_id: int
    num_workers: int
    total_shm_size: int
    slice_size: int

    def fields(self):
        return (self.proto_version, self.reserved, self.assigned_id,
                self.num_workers, self.total_shm_size, self.slice_size)


@dataclass(frozen=True)
class Ready:
    TYPE = 0x03
    FORMAT = struct.Struct("<II")
    assigned_id: int
    status: int = 0

    def fields(self):
        return (self.assigned_id, self.status)


Message = Union[Hello, Welcome, Ready]
MESSAGE_TYPES = {cls.TYPE: cls for cls in (Hello, Welcome, Ready)}


def encode_frame(msg: Message) -> bytes:
    try:
        payload = msg.FORMAT.pack(*msg.fields())
    except struct.error as exc:
        raise ValueError(f"cannot encode {msg!r}: {exc}") from exc
    return _LEN.pack(1 + len(payload)) + bytes([msg.TYPE]) + payload


def decode_frame(data: bytes) -> Message:
    """Decode exactly one complete frame; any slack or shortfall is an error."""
    data = bytes(data)
    if len(data) < 5:
        raise DecodeError(f"frame too short ({len(data)} bytes)")
    (length,) = _LEN.unpack_from(data)
    if length < 1 or length > MAX_FRAME:
        raise DecodeError(f"bad frame length {length}")
    if len(data) != 4 + length:
        raise DecodeError(f"frame length field says {length}, have {len(data) - 4} bytes")
    cls = MESSAGE_TYPES.get(data[4])
    if cls is None:
        raise DecodeError(f"unknown frame type 0x{data[4]:02X}")
    payload = data[5:]
    if len(payload) != cls.FORMAT.size:
        raise DecodeError(f"{cls.__name__} payload is {len(payload)} bytes, expected {cls.FORMAT.size}")
    return cls(*cls.FORMAT.unpack(payload))


def _close_fds(fds) -> None:
    for fd in fds:
        try:
            os.close(fd)
        except OSError:
            pass


def send_frame(sock: socket.socket, msg: Message, fds=()) -> None:
    data = encode_frame(msg)
    if fds:
        sent = socket.send_fds(sock, [data], list(fds))
        if sent != len(data):
            sock.sendall(data[sent:])
    else:
        sock.sendall(data)


def _recv_exact(sock: socket.socket, n: int, fds: list[int], *, at_boundary: bool) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk, got, flags, _ = socket.recv_fds(sock, n - len(buf), 4)
        fds.extend(got)
        if flags & socket.MSG_CTRUNC:
            raise ProtocolError("control data truncated")
        if not chunk:
            if at_boundary and not buf:
                raise ClosedError("peer closed the connection")
            raise DecodeError(f"short read: {len(buf)} of {n} bytes")
        buf += chunk
    return buf


def recv_frame(sock: socket.socket) -> tuple[Message, list[int]]:
    """Read one frame plus whatever descriptors rode along with it."""
    fds: list[int] = []
    try:
        head = _recv_exact(sock, 4, fds, at_boundary=True)
        (length,) = _LEN.unpack(head)
        if length < 1 or length > MAX_FRAME:
            raise DecodeError(f"bad frame length {length}")
        body = _recv_exact(sock, length, fds, at_boundary=False)
        return decode_frame(head + body), fds
    except socket.timeout as exc:
        _close_fds(fds)
        raise Timeout("timed out waiting for a frame") from exc
    except BaseException:
        _close_fds(fds)
        raise


@dataclass
class RosterEntry:
    assigned_id: int
    to_worker: Doorbell
    from_worker: Doorbell
    conn: socket.socket
    ready: bool
    joined_at: float

    def close(self) -> None:
        self.to_worker.close()
        self.from_worker.close()
        self.conn.close()


@dataclass
class Roster:
    entries: dict[int, RosterEntry] = field(default_factory=dict)
    frames: int = 0
    rejected: list[str] = field(default_factory=list)

    @property
    def ids(self) -> list[int]:
        return sorted(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, worker_id: int) -> RosterEntry:
        return self.entries[worker_id]

    def close(self) -> None:
        for e in self.entries.values():
            e.close()
        self.entries.clear()


def listen_unix(endpoint: str, backlog: int = 128) -> socket.socket:
    try:
        os.unlink(endpoint)
    except FileNotFoundError:
        pass
    srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    srv.bind(endpoint)
    srv.listen(backlog)
    return srv


def _admit(conn: socket.socket, region: ManagerRegion, worker_id: int, roster: Roster) -> RosterEntry:
    msg, fds = recv_frame(conn)
    roster.frames += 1
    _close_fds(fds)
    if fds:
        raise ProtocolError("Hello must not carry descriptors")
    if not isinstance(msg, Hello):
        raise ProtocolError(f"expected Hello, got {type(msg).__name__}")
    if msg.proto_version != PROTO_VERSION:
        raise ProtocolError(f"protocol version {msg.proto_version} != {PROTO_VERSION}")

    geo = region.geometry
    to_worker = create_doorbell("manager->worker")
    from_worker = create_doorbell("worker->manager")
    try:
        welcome = Welcome(PROTO_VERSION, 0, worker_id, geo.num_workers, geo.total_size, geo.slice_size)
        send_frame(conn, welcome, [region.slice(worker_id).fd, to_worker.fd, from_worker.fd])
        roster.frames += 1
        msg, fds = recv_frame(conn)
        roster.frames += 1
        _close_fds(fds)
        if not isinstance(msg, Ready):
            raise ProtocolError(f"expected Ready, got {type(msg).__name__}")
        if msg.assigned_id != worker_id:
            raise ProtocolError(f"Ready echoes id {msg.assigned_id}, assigned {worker_id}")
        if msg.status != 0:
            raise ProtocolError(f"worker {worker_id} reported status {msg.status}")
    except BaseException:
        to_worker.close()
        from_worker.close()
        raise
    return RosterEntry(
        worker_id,
        Doorbell(to_worker.fd, peer=conn, direction=to_worker.direction),
        Doorbell(from_worker.fd, peer=conn, direction=from_worker.direction),
        conn,
        True,
        time.monotonic(),
    )


def manager_serve(endpoint: str, region: ManagerRegion, *, timeout: float = DEFAULT_TIMEOUT,
                  listener: socket.socket | None = None) -> Roster:
    """Admit ``num_workers`` workers on ``endpoint`` and return the roster.

    Joins are handled one at a time in arrival order.  A connection that
    breaks protocol is dropped and its id goes back to the pool; ``timeout``
    bounds the wait for each admission.
    """
    n = region.geometry.num_workers
    srv = listener or listen_unix(endpoint, backlog=max(128, n))
    roster = Roster()
    try:
        while len(roster) < n:
            srv.settimeout(timeout)
            try:
                conn, _ = srv.accept()
            except socket.timeout as exc:
                raise Timeout(f"only {len(roster)} of {n} workers joined within {timeout}s") from exc
            conn.settimeout(timeout)
            worker_id = len(roster) + 1
            try:
                entry = _admit(conn, region, worker_id, roster)
            except (ShmSliceError, OSError) as exc:
                log.warning("rejected connection for id %d: %s", worker_id, exc)
                roster.rejected.append(str(exc))
                conn.close()
                continue
            conn.settimeout(None)
            roster.entries[worker_id] = entry
    except BaseException:
        roster.close()
        raise
    finally:
        srv.close()
        if listener is None:
            try:
                os.unlink(endpoint)
            except FileNotFoundError:
                pass
    return roster


def connect_unix(endpoint: str, timeout: float) -> socket.socket:
    """Connect, retrying while the listener is not up yet."""
    deadline = time.monotonic() + timeout
    delay = 0.001
    while True:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            sock.connect(endpoint)
            return sock
        except (FileNotFoundError, ConnectionRefusedError):
            sock.close()
            if time.monotonic() > deadline:
                raise Timeout(f"nobody listening on {endpoint} after {timeout}s") from None
            time.sleep(delay)
            delay = min(delay * 2, 0.05)


class Joined(NamedTuple):
    slice: WorkerSlice
    recv: Doorbell
    send: Doorbell
    welcome: Welcome
    conn: socket.socket


def worker_join(endpoint: str, *, timeout: float = DEFAULT_TIMEOUT) -> Joined:
    sock = connect_unix(endpoint, timeout)
    sock.settimeout(timeout)
    try:
        send_frame(sock, Hello())
        msg, fds = recv_frame(sock)
        if not isinstance(msg, Welcome):
            _close_fds(fds)
            raise ProtocolError(f"expected Welcome, got {type(msg).__name__}")
        if len(fds) != 3:
            _close_fds(fds)
            raise ProtocolError(f"Welcome carried {len(fds)} descriptors, expected 3")
        slice_fd, recv_fd, send_fd = fds
        try:
            if msg.proto_version != PROTO_VERSION:
                raise ProtocolError(f"manager speaks protocol {msg.proto_version}")
            if not 1 <= msg.assigned_id <= msg.num_workers:
                raise ProtocolError(f"assigned id {msg.assigned_id} outside 1..{msg.num_workers}")
            geo = compute_geometry(msg.total_shm_size, msg.num_workers)
            if geo.slice_size != msg.slice_size:
                raise ProtocolError(f"slice size {msg.slice_size} inconsistent with region geometry")
        except BaseException:
            _close_fds(fds)
            raise
        try:
            ws = attach_slice(slice_fd, msg.slice_size, msg.assigned_id)
        except BaseException:
            _close_fds([recv_fd, send_fd])
            raise
        recv = Doorbell(recv_fd, peer=sock, direction="manager->worker")
        send = Doorbell(send_fd, peer=sock, direction="worker->manager")
        send_frame(sock, Ready(msg.assigned_id, 0))
    except socket.timeout as exc:
        sock.close()
        raise Timeout("handshake timed out") from exc
    except BaseException:
        sock.close()
        raise
    sock.settimeout(None)
    return Joined(ws, recv, send, msg, sock)
