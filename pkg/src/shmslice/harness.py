"""Map-reduce job: stripe the stream into slices, count, consolidate.

Round ``r`` gives worker ``j`` (1-based) the stream range
``[(r*N + j - 1) * C, min(... + C, total))`` where ``C`` is the payload
capacity of a slice.  Workers whose range is empty in the last round still
get a round with ``data_len == 0``.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import ClosedError, ProtocolError, ShmSliceError
from .region import OP_COUNT, ManagerRegion, WorkerSlice, write_payload
from .signaling import Doorbell, SignalMode, await_data, await_done, complete, publish

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class JobSpec:
    total_data: int
    num_workers: int
    seed: int = 42
    target_byte: int = 0x61
    mode: SignalMode = SignalMode.EVENT
    transport: str = "shm"
    mapper_threads: int = 1
    inter_round_delay: float = 0.0
    iters: int = 1

    def __post_init__(self):
        if self.total_data <= 0:
            raise ValueError("total_data must be positive")
        if self.mapper_threads < 1:
            raise ValueError("mapper_threads must be >= 1")
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        if not 0 <= self.target_byte <= 0xFF:
            raise ValueError("target_byte must be a single byte")
        if self.transport not in ("shm", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        object.__setattr__(self, "mode", SignalMode(self.mode))


@dataclass
class JobReport:
    xfer_time: float = 0.0
    resp_time: float = 0.0
    per_worker_counts: list[int] = field(default_factory=list)
    total_count: int = 0
    rounds: int = 0
    cpu_utilization: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    aborted: bool = False
    error: str | None = None
    socket_buffers: tuple[int, int] | None = None  # (SO_SNDBUF, SO_RCVBUF), tcp only


@dataclass
class WorkerStats:
    rounds: int = 0
    cpu_time: float = 0.0
    wall_time: float = 0.0

    @property
    def utilization(self) -> float:
        return self.cpu_time / self.wall_time if self.wall_time > 0 else 0.0


def count_occurrences(data, target: int) -> int:
    if not isinstance(data, (bytes, bytearray)):
        data = bytes(data)
    return data.count(target)


def num_rounds(total_data: int, num_workers: int, capacity: int) -> int:
    return math.ceil(total_data / (num_workers * capacity))


def stripe_ranges(total_data: int, num_workers: int, capacity: int):
    """Yield, per round, a list of ``(worker_id, start, end)``."""
    per_round = num_workers * capacity
    for r in range(num_rounds(total_data, num_workers, capacity)):
        out = []
        for j in range(1, num_workers + 1):
            start = min((r * num_workers + j - 1) * capacity, total_data)
            end = min(start + capacity, total_data)
            out.append((j, start, end))
        yield r, r * per_round, out


class _Striper:
    """Copies one round's staging buffer into slices with a thread pool."""

    def __init__(self, threads: int, copy_one):
        self.threads = threads
        self.copy_one = copy_one
        self.pool = ThreadPoolExecutor(threads) if threads > 1 else None

    def run(self, assignments) -> float:
        groups = [assignments[t::self.threads] for t in range(self.threads)]

        def work(group):
            t0 = time.perf_counter()
            for item in group:
                self.copy_one(*item)
            return t0, time.perf_counter()

        if self.pool is None:
            spans = [work(groups[0])]
        else:
            spans = list(self.pool.map(work, [g for g in groups if g]))
        return max(e for _, e in spans) - min(s for s, _ in spans)

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def run_rounds(spec: JobSpec, capacity: int, copy_one, publish_all, await_all) -> JobReport:
    """Drive the round loop shared by the shm and tcp transports.

    ``copy_one(worker_id, view)`` moves one worker's bytes, ``publish_all``
    announces the round and ``await_all`` returns the per-worker results.
    """
    # numpy stays out of worker start-up
    from .stream import fill_stream

    n = spec.num_workers
    report = JobReport(per_worker_counts=[0] * n)
    report.rounds = num_rounds(spec.total_data, n, capacity)
    staging = bytearray(n * capacity)
    view = memoryview(staging)
    striper = _Striper(min(spec.mapper_threads, n), copy_one)
    wall0 = time.perf_counter()
    try:
        for r, round_start, ranges in stripe_ranges(spec.total_data, n, capacity):
            if r and spec.inter_round_delay > 0:
                time.sleep(spec.inter_round_delay)
            length = max(end for _, _, end in ranges) - round_start
            fill_stream(view[:length], spec.seed, round_start)
            assignments = [(j, view[s - round_start:e - round_start]) for j, s, e in ranges]
            report.xfer_time += striper.run(assignments)
            publish_all([(j, e - s) for j, s, e in ranges])
            t_pub = time.perf_counter()
            results = await_all()
            report.resp_time += time.perf_counter() - t_pub
            for j, value in results:
                report.per_worker_counts[j - 1] += value
    except (ClosedError, ProtocolError, ShmSliceError, OSError) as exc:
        log.error("job aborted: %s", exc)
        report.aborted = True
        report.error = f"{type(exc).__name__}: {exc}"
    finally:
        striper.close()
        report.wall_time = time.perf_counter() - wall0
        report.total_count = sum(report.per_worker_counts)
    return report


def run_mapper(region: ManagerRegion, roster, spec: JobSpec, *, terminate: bool = True,
               timeout: float | None = None) -> JobReport:
    n = region.geometry.num_workers
    if spec.num_workers != n or len(roster) != n:
        raise ValueError(f"spec wants {spec.num_workers} workers, region has {n}, roster has {len(roster)}")
    event = spec.mode is SignalMode.EVENT
    capacity = region.geometry.payload_capacity

    def copy_one(j, view):
        write_payload(region, j, view)

    def publish_all(lengths):
        for j, length in lengths:
            publish(region, j, length, spec.target_byte,
                    roster[j].to_worker if event else None, target_op=OP_COUNT)

    def await_all():
        out = []
        for j in range(1, n + 1):
            e = roster[j]
            last = region.slice(j).data_seq - 1
            done = await_done(region, j, last, spec.mode, e.from_worker if event else None,
                              peer=e.conn, timeout=timeout)
            out.append((j, done.result))
        return out

    t0 = time.perf_counter()
    report = run_rounds(spec, capacity, copy_one, publish_all, await_all)
    if terminate and not report.aborted:
        terminate_workers(region, roster, spec.mode)
    report.wall_time = time.perf_counter() - t0
    return report


def terminate_workers(region: ManagerRegion, roster, mode: SignalMode, *,
                      wait: bool = True, timeout: float | None = 10.0) -> None:
    """Publish the terminate flag to every slice; optionally await the acks."""
    event = SignalMode(mode) is SignalMode.EVENT
    for j in roster.ids:
        publish(region, j, 0, 0, roster[j].to_worker if event else None, terminate=True)
    if not wait:
        return
    for j in roster.ids:
        e = roster[j]
        try:
            await_done(region, j, region.slice(j).data_seq - 1, mode,
                       e.from_worker if event else None, peer=e.conn, timeout=timeout)
        except ClosedError:
            pass  # exited before acknowledging; nothing left to wait for


def run_worker(slice: WorkerSlice, recv: Doorbell | None, send: Doorbell | None, mode: SignalMode, *,
               iters: int = 1, peer=None, timeout: float | None = None) -> WorkerStats:
    """Serve rounds until the terminate flag arrives; the terminate round is
    acknowledged so the header is left in lockstep."""
    mode = SignalMode(mode)
    stats = WorkerStats()
    cpu0, wall0 = time.process_time(), time.perf_counter()
    last = slice.map.done_seq
    while True:
        notice = await_data(slice, last, mode, recv, peer=peer, timeout=timeout)
        last = notice.seq
        if notice.terminate:
            complete(slice, 0, mode, send)
            break
        if slice.map.target_op != OP_COUNT:
            raise ProtocolError(f"unsupported target op {slice.map.target_op}")
        data = slice.read_payload(0, notice.data_len) if notice.data_len else b""
        count = 0
        for _ in range(max(1, iters)):
            count = data.count(notice.target_arg)
        complete(slice, count, mode, send)
        stats.rounds += 1
    stats.cpu_time = time.process_time() - cpu0
    stats.wall_time = time.perf_counter() - wall0
    return stats
