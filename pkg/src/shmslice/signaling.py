"""Doorbells and the publish/complete round protocol.

Two signaling planes carry the same protocol:

* POLL: workers and the manager spin on the ``data_seq``/``done_seq`` words
  in the slice header.
* EVENT: the same counters are authoritative, but the waiting side blocks on
  an eventfd doorbell instead of spinning.  Doorbell values are treated as
  "at least one event" only; every wakeup re-checks the counters.

Writers update the payload-describing fields first, fence, then bump the
sequence word with a single aligned 8-byte store.  Readers load the sequence
word, fence, then read the rest.
"""

from __future__ import annotations

import enum
import os
import select
import socket
import threading
import time
from typing import NamedTuple

from .errors import ClosedError, ProtocolError, RangeError, ResourceError, Timeout
from .region import FLAG_TERMINATE, OP_COUNT, ManagerRegion, WorkerSlice

DOORBELL_MAX = 2**64 - 2
SPIN_BATCH = 256

_fence_lock = threading.Lock()


def fence() -> None:
    """Full memory barrier: a locked read-modify-write on the host CPU."""
    _fence_lock.acquire()
    _fence_lock.release()


class SignalMode(str, enum.Enum):
    POLL = "poll"
    EVENT = "event"


def peer_gone(peer) -> bool:
    """True once the other end of ``peer`` (a connected socket) has closed."""
    p = select.poll()
    p.register(peer, select.POLLRDHUP)
    for _fd, ev in p.poll(0):
        if ev & (select.POLLRDHUP | select.POLLHUP | select.POLLERR | select.POLLNVAL):
            return True
    return False


class Doorbell:
    """A kernel 64-bit event counter: ``signal`` adds, ``wait`` drains.

    ``peer`` is an optional connected socket whose hang-up means nobody is
    left to ring this doorbell; waits then raise :class:`ClosedError`.
    """

    def __init__(self, fd: int, peer: socket.socket | None = None, direction: str = ""):
        self.fd = fd
        self.peer = peer
        self.direction = direction
        self._poller = select.poll()
        self._poller.register(fd, select.POLLIN)
        if peer is not None:
            self._poller.register(peer, select.POLLRDHUP)

    def fileno(self) -> int:
        return self.fd

    def signal(self, n: int = 1) -> None:
        if not 1 <= n <= DOORBELL_MAX:
            raise ValueError(f"signal amount must be in 1..2**64-2, got {n}")
        try:
            os.eventfd_write(self.fd, n)
        except BlockingIOError:
            raise OverflowError(f"doorbell counter cannot absorb +{n} without exceeding 2**64-2") from None

    def try_wait(self) -> int | None:
        try:
            return os.eventfd_read(self.fd)
        except BlockingIOError:
            return None

    def wait(self, timeout: float | None = None) -> int:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            v = self.try_wait()
            if v is not None:
                return v
            if deadline is None:
                wait_ms = None
            else:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Timeout(f"doorbell {self.direction or self.fd} not signaled within {timeout}s")
                wait_ms = max(1, int(remaining * 1000))
            for fd, ev in self._poller.poll(wait_ms):
                if fd != self.fd and ev:
                    # drain anything already queued before reporting the hang-up
                    v = self.try_wait()
                    if v is not None:
                        return v
                    raise ClosedError(f"peer of doorbell {self.direction or self.fd} is gone")

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def __repr__(self):
        return f"Doorbell(fd={self.fd}, direction={self.direction!r})"


def create_doorbell(direction: str = "") -> Doorbell:
    try:
        fd = os.eventfd(0, os.EFD_NONBLOCK | os.EFD_CLOEXEC)
    except OSError as exc:
        raise ResourceError(exc.errno, f"eventfd: {exc.strerror}") from exc
    return Doorbell(fd, direction=direction)


class DataNotice(NamedTuple):
    seq: int
    data_len: int
    target_arg: int
    terminate: bool


class DoneNotice(NamedTuple):
    seq: int
    result: int


def _spin_until(read, last: int, peer, deadline: float | None, on_probe=None) -> int:
    n = 0
    while True:
        v = read()
        if on_probe is not None:
            on_probe()
        if v > last:
            fence()
            return v
        n += 1
        if n % SPIN_BATCH == 0:
            # stays runnable; only lets a co-scheduled peer make progress
            os.sched_yield()
            if peer is not None and peer_gone(peer):
                # the peer may have completed and exited since the last probe
                v = read()
                if v > last:
                    fence()
                    return v
                raise ClosedError("peer hung up while polling")
            if deadline is not None and time.monotonic() > deadline:
                raise Timeout("poll wait timed out")


def _event_until(read, last: int, doorbell: Doorbell | None, deadline: float | None, on_probe=None) -> int:
    if doorbell is None:
        raise ValueError("event mode needs a doorbell")
    while True:
        v = read()
        if on_probe is not None:
            on_probe()
        if v > last:
            fence()
            return v
        remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
        try:
            doorbell.wait(remaining)
        except ClosedError:
            if read() > last:
                continue
            raise


def publish(
    region: ManagerRegion,
    slice_id: int,
    data_len: int,
    target_arg: int,
    doorbell: Doorbell | None = None,
    *,
    terminate: bool = False,
    target_op: int = OP_COUNT,
) -> int:
    """Announce a round on ``slice_id``; returns the new ``data_seq``."""
    if slice_id < 1:
        raise RangeError("only worker slices can be published")
    s = region.slice(slice_id)
    if not 0 <= data_len <= s.payload_capacity:
        raise RangeError(f"data_len {data_len} exceeds payload capacity {s.payload_capacity}")
    if not 0 <= target_arg <= 0xFF:
        raise RangeError(f"target byte {target_arg} out of range")
    seq = s.data_seq
    if s.done_seq != seq:
        raise ProtocolError(f"slice {slice_id}: round {seq} still outstanding")
    s.data_len = data_len
    s.target_op = target_op
    s.target_arg = target_arg
    s.flags = FLAG_TERMINATE if terminate else 0
    fence()
    s.data_seq = seq + 1
    if doorbell is not None:
        doorbell.signal(1)
    return seq + 1


def await_data(
    slice: WorkerSlice,
    last_seq: int,
    mode: SignalMode,
    doorbell: Doorbell | None = None,
    *,
    peer=None,
    timeout: float | None = None,
) -> DataNotice:
    m = slice.map
    if peer is None and doorbell is not None:
        peer = doorbell.peer
    deadline = None if timeout is None else time.monotonic() + timeout
    if SignalMode(mode) is SignalMode.POLL:
        seq = _spin_until(lambda: m.data_seq, last_seq, peer, deadline)
    else:
        seq = _event_until(lambda: m.data_seq, last_seq, doorbell, deadline)
    return DataNotice(seq, m.data_len, m.target_arg, bool(m.flags & FLAG_TERMINATE))


def complete(
    slice: WorkerSlice,
    result: int,
    mode: SignalMode,
    doorbell: Doorbell | None = None,
) -> None:
    m = slice.map
    seq = m.data_seq
    if m.done_seq != seq - 1:
        raise ProtocolError(f"slice {slice.slice_id}: no round outstanding (data_seq={seq}, done_seq={m.done_seq})")
    if not 0 <= result < 2**64:
        raise RangeError(f"result {result} does not fit in u64")
    m.result = result
    fence()
    m.done_seq = seq
    if SignalMode(mode) is SignalMode.EVENT:
        if doorbell is None:
            raise ValueError("event mode needs a doorbell")
        doorbell.signal(1)


def await_done(
    region: ManagerRegion,
    slice_id: int,
    last_seq: int,
    mode: SignalMode,
    doorbell: Doorbell | None = None,
    *,
    peer=None,
    timeout: float | None = None,
) -> DoneNotice:
    s = region.slice(slice_id)
    if peer is None and doorbell is not None:
        peer = doorbell.peer
    deadline = None if timeout is None else time.monotonic() + timeout

    def check_lockstep():
        lag = s.data_seq - s.done_seq
        if lag not in (0, 1):
            raise ProtocolError(f"slice {slice_id}: lockstep broken (data_seq - done_seq = {lag})")

    if SignalMode(mode) is SignalMode.POLL:
        seq = _spin_until(lambda: s.done_seq, last_seq, peer, deadline, check_lockstep)
    else:
        seq = _event_until(lambda: s.done_seq, last_seq, doorbell, deadline, check_lockstep)
    return DoneNotice(seq, s.result)
