"""Process orchestration: job and boot benchmarks, CPU and latency probes.

The orchestrating process doubles as the manager.  Workers, and the
distributor in the baseline boot mode, are separate interpreter processes
started with ``python -m shmslice``.
"""

from __future__ import annotations

import csv
import logging
import os
import shutil
import statistics
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field

import psutil

from .distributor import PeerSession, expected_records
from .errors import ProcessGone, SpawnError, Timeout
from .handshake import listen_unix, manager_serve
from .harness import JobReport, JobSpec, terminate_workers, run_mapper
from .netbase import DEFAULT_HOST, TcpSession, run_tcp_mapper
from .region import RegionConfig, compute_geometry, create_region
from .signaling import SignalMode, create_doorbell

log = logging.getLogger(__name__)

MiB = 1 << 20

CSV_SCHEMA_VERSION = 1
CSV_FIELDS = [
    "run", "transport", "mode", "workers", "mapper_threads", "total_data", "shm_size",
    "seed", "rounds", "xfer_s", "resp_s", "wall_s", "total_count", "cpu_util_worker_mean",
    "socket_buffers",
]
BOOT_FIELDS = ["run", "mode", "workers", "peers", "wall_s", "frames_or_records"]


@dataclass
class BenchConfig:
    shm_size: int = 64 * MiB
    workers: int = 3
    total_data: int = 256 * MiB
    seed: int = 42
    target: int = 0x61
    mode: SignalMode = SignalMode.EVENT
    transport: str = "shm"
    mapper_threads: int = 1
    reps: int = 1
    csv_path: str | None = None
    persist: bool = False
    region_name: str = "shmslice"
    delay_ms: float = 0.0
    iters: int = 1
    socket_path: str | None = None
    port_base: int = 47000
    timeout: float = 60.0

    def __post_init__(self):
        self.mode = SignalMode(self.mode)

    def validate(self) -> None:
        compute_geometry(self.shm_size, self.workers)
        self.job_spec()
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.transport == "tcp" and not 0 < self.port_base + self.workers < 65536:
            raise ValueError(f"port range {self.port_base}+1..{self.workers} is not valid")

    def job_spec(self) -> JobSpec:
        return JobSpec(
            total_data=self.total_data, num_workers=self.workers, seed=self.seed,
            target_byte=self.target, mode=self.mode, transport=self.transport,
            mapper_threads=self.mapper_threads, inter_round_delay=self.delay_ms / 1000.0,
            iters=self.iters,
        )


def _python_m(*args: str) -> list[str]:
    return [sys.executable, "-m", "shmslice", *args]


def spawn(cmd: list[str], **kwargs) -> subprocess.Popen:
    try:
        return subprocess.Popen(cmd, **kwargs)
    except OSError as exc:
        raise SpawnError(f"cannot start {cmd[0]}: {exc}") from exc


def reap(procs, timeout: float = 10.0) -> None:
    """Wait for children, killing any that outlive ``timeout``."""
    deadline = time.monotonic() + timeout
    for p in procs:
        try:
            p.wait(max(0.0, deadline - time.monotonic()))
        except subprocess.TimeoutExpired:
            log.warning("killing straggler pid %d", p.pid)
            p.kill()
            p.wait()


def _cpu_seconds(proc: psutil.Process) -> float:
    try:
        t = proc.cpu_times()
    except (psutil.NoSuchProcess, psutil.ZombieProcess) as exc:
        raise ProcessGone(f"pid {proc.pid} exited") from exc
    return t.user + t.system


class CpuSampler:
    """CPU utilization of a set of processes over an explicit window."""

    def __init__(self, pids):
        self.procs = [psutil.Process(pid) for pid in pids]
        self._start: list[float] = []
        self._t0 = 0.0

    def start(self) -> None:
        self._start = [_cpu_seconds(p) for p in self.procs]
        self._t0 = time.monotonic()

    def stop(self) -> list[float]:
        window = time.monotonic() - self._t0
        used = [_cpu_seconds(p) - s for p, s in zip(self.procs, self._start)]
        return [min(1.0, max(0.0, u / window)) if window > 0 else 0.0 for u in used]


def measure_cpu_util(proc, window: float) -> float:
    """Fraction of one CPU that ``proc`` (a pid, Popen or psutil.Process)
    burned during the next ``window`` seconds."""
    pid = proc if isinstance(proc, int) else proc.pid
    try:
        sampler = CpuSampler([pid])
    except psutil.NoSuchProcess as exc:
        raise ProcessGone(f"pid {pid} is not running") from exc
    sampler.start()
    time.sleep(window)
    return sampler.stop()[0]


def _scratch_dir() -> str:
    return tempfile.mkdtemp(prefix="shmslice-")


def run_shm_job(config: BenchConfig) -> JobReport:
    spec = config.job_spec()
    tmp = _scratch_dir()
    endpoint = config.socket_path or os.path.join(tmp, "manager.sock")
    region = create_region(RegionConfig(config.shm_size, config.workers, config.persist, config.region_name))
    procs: list[subprocess.Popen] = []
    roster = None
    try:
        listener = listen_unix(endpoint, backlog=max(128, config.workers))
        cmd = _python_m("worker", "--socket", endpoint, "--mode", spec.mode.value,
                        "--iters", str(config.iters), "--timeout", str(config.timeout))
        for _ in range(config.workers):
            procs.append(spawn(cmd))
        roster = manager_serve(endpoint, region, timeout=config.timeout, listener=listener)
        sampler = CpuSampler([p.pid for p in procs])
        sampler.start()
        report = run_mapper(region, roster, spec, terminate=False, timeout=config.timeout)
        try:
            report.cpu_utilization = sampler.stop()
        except ProcessGone:
            report.cpu_utilization = []
        if not report.aborted:
            terminate_workers(region, roster, spec.mode, timeout=config.timeout)
        return report
    finally:
        if roster is not None:
            roster.close()
        reap(procs)
        if config.persist:
            region.close()
        else:
            region.destroy()
        shutil.rmtree(tmp, ignore_errors=True)


def run_tcp_job(config: BenchConfig) -> JobReport:
    spec = config.job_spec()
    chunk = compute_geometry(config.shm_size, config.workers).payload_capacity
    endpoints = [(DEFAULT_HOST, config.port_base + j) for j in range(1, config.workers + 1)]
    procs = []
    session = None
    try:
        for j in range(1, config.workers + 1):
            procs.append(spawn(_python_m("worker", "--transport", "tcp", "--port-base", str(config.port_base),
                                         "--id", str(j), "--iters", str(config.iters),
                                         "--timeout", str(config.timeout))))
        session = TcpSession(endpoints, timeout=config.timeout)
        sampler = CpuSampler([p.pid for p in procs])
        sampler.start()
        report = run_tcp_mapper(spec, chunk_size=chunk, session=session, terminate=False)
        report.socket_buffers = session.buffer_sizes()
        try:
            report.cpu_utilization = sampler.stop()
        except ProcessGone:
            report.cpu_utilization = []
        session.terminate()
        return report
    finally:
        if session is not None:
            session.close()
        reap(procs)


def run_job(config: BenchConfig) -> JobReport:
    config.validate()
    if config.transport == "tcp":
        return run_tcp_job(config)
    return run_shm_job(config)


def report_row(run, config: BenchConfig, report: JobReport) -> dict:
    util = statistics.fmean(report.cpu_utilization) if report.cpu_utilization else 0.0
    return {
        "run": run,
        "transport": config.transport,
        "mode": config.mode.value,
        "workers": config.workers,
        "mapper_threads": config.mapper_threads,
        "total_data": config.total_data,
        "shm_size": config.shm_size,
        "seed": config.seed,
        "rounds": report.rounds,
        "xfer_s": f"{report.xfer_time:.6f}",
        "resp_s": f"{report.resp_time:.6f}",
        "wall_s": f"{report.wall_time:.6f}",
        "total_count": report.total_count if not report.aborted else f"ABORTED: {report.error}",
        "cpu_util_worker_mean": f"{util:.4f}",
        "socket_buffers": "/".join(map(str, report.socket_buffers)) if report.socket_buffers else "",
    }


def summary_row(config: BenchConfig, reports: list[JobReport]) -> dict:
    """Mean and population standard deviation, written as ``mean/sd``."""
    def ms(values):
        return f"{statistics.fmean(values):.6f}/{statistics.pstdev(values):.6f}"

    counts = {r.total_count for r in reports}
    utils = [statistics.fmean(r.cpu_utilization) for r in reports if r.cpu_utilization]
    return {
        "run": "summary",
        "transport": config.transport,
        "mode": config.mode.value,
        "workers": config.workers,
        "mapper_threads": config.mapper_threads,
        "total_data": config.total_data,
        "shm_size": config.shm_size,
        "seed": config.seed,
        "rounds": reports[0].rounds,
        "xfer_s": ms([r.xfer_time for r in reports]),
        "resp_s": ms([r.resp_time for r in reports]),
        "wall_s": ms([r.wall_time for r in reports]),
        "total_count": counts.pop() if len(counts) == 1 else "MISMATCH",
        "cpu_util_worker_mean": f"{statistics.fmean(utils):.4f}" if utils else "",
    }


def bench_job(config: BenchConfig) -> tuple[list[dict], list[JobReport]]:
    config.validate()
    rows, reports = [], []
    for run in range(config.reps):
        try:
            report = run_job(config)
        except Exception as exc:
            log.error("run %d failed: %s", run, exc)
            rows.append({"run": run, "transport": config.transport, "mode": config.mode.value,
                         "total_count": f"ERROR: {type(exc).__name__}: {exc}"})
            return rows, reports
        reports.append(report)
        rows.append(report_row(run, config, report))
    rows.append(summary_row(config, reports))
    return rows, reports


def write_csv(rows: list[dict], path: str | None = None, fields=CSV_FIELDS) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    finally:
        if path:
            fh.close()


@dataclass
class BootReport:
    mode: str
    workers: int
    peers: int
    wall_time: float
    frames_or_records: int

    def row(self, run) -> dict:
        return {"run": run, "mode": self.mode, "workers": self.workers, "peers": self.peers,
                "wall_s": f"{self.wall_time:.6f}", "frames_or_records": self.frames_or_records}


def _ready_stamps(procs, timeout: float) -> list[int]:
    stamps = []
    deadline = time.monotonic() + timeout
    for p in procs:
        try:
            out, _ = p.communicate(timeout=max(0.1, deadline - time.monotonic()))
        except subprocess.TimeoutExpired as exc:
            raise Timeout(f"peer pid {p.pid} did not finish registering") from exc
        for line in out.decode().splitlines():
            if line.startswith("ready "):
                stamps.append(int(line.split()[1]))
    if len(stamps) != len(procs):
        raise SpawnError(f"{len(procs) - len(stamps)} peers never reported ready")
    return stamps


def boot_direct(workers: int, shm_size: int = 64 * MiB, timeout: float = 60.0) -> BootReport:
    tmp = _scratch_dir()
    endpoint = os.path.join(tmp, "manager.sock")
    region = create_region(RegionConfig(shm_size, workers))
    procs = []
    roster = None
    try:
        listener = listen_unix(endpoint, backlog=max(128, workers))
        cmd = _python_m("worker", "--socket", endpoint, "--mode", "event", "--timeout", str(timeout))
        t0 = time.monotonic_ns()
        for _ in range(workers):
            procs.append(spawn(cmd))
        roster = manager_serve(endpoint, region, timeout=timeout, listener=listener)
        t1 = time.monotonic_ns()
        terminate_workers(region, roster, SignalMode.EVENT, timeout=timeout)
        return BootReport("direct", workers, workers + 1, (t1 - t0) / 1e9, roster.frames)
    finally:
        if roster is not None:
            roster.close()
        reap(procs)
        region.destroy()
        shutil.rmtree(tmp, ignore_errors=True)


def boot_distributor(workers: int, shm_size: int = 64 * MiB, timeout: float = 60.0) -> BootReport:
    peers = workers + 1
    tmp = _scratch_dir()
    endpoint = os.path.join(tmp, "distributor.sock")
    procs = []
    dist = None
    table = None
    try:
        t0 = time.monotonic_ns()
        dist = spawn(_python_m("distributor", "--socket", endpoint, "--peers", str(peers),
                               "--shm-size", str(shm_size), "--timeout", str(timeout)),
                     stdout=subprocess.PIPE)
        session = PeerSession(endpoint, peers, timeout=timeout)
        session.join()
        if session.table.own_id != 0:
            raise SpawnError(f"manager was assigned peer id {session.table.own_id}")
        cmd = _python_m("worker", "--boot", "distributor", "--socket", endpoint, "--peers", str(peers),
                        "--timeout", str(timeout))
        for _ in range(workers):
            procs.append(spawn(cmd, stdout=subprocess.PIPE))
        table = session.complete()
        t_mgr = time.monotonic_ns()
        stamps = _ready_stamps(procs, timeout)
        out, _ = dist.communicate(timeout=timeout)
        records = None
        for line in out.decode().splitlines():
            if line.startswith("records "):
                records = int(line.split()[1])
        if records is None:
            raise SpawnError("distributor did not report its record count")
        t1 = max([t_mgr, *stamps])
        return BootReport("distributor", workers, peers, (t1 - t0) / 1e9, records)
    finally:
        if table is not None:
            table.close()
        reap(procs)
        if dist is not None:
            reap([dist])
        shutil.rmtree(tmp, ignore_errors=True)


def bench_boot(mode: str, workers: int, repetitions: int, *, shm_size: int = 64 * MiB,
               timeout: float = 60.0) -> list[BootReport]:
    fn = {"direct": boot_direct, "distributor": boot_distributor}[mode]
    out = []
    for _ in range(repetitions):
        rep = fn(workers, shm_size, timeout)
        law = 3 * workers if mode == "direct" else expected_records(workers + 1)
        if rep.frames_or_records != law:
            raise AssertionError(f"{mode}: {rep.frames_or_records} messages, law says {law}")
        out.append(rep)
    return out


@dataclass
class LatencySummary:
    count: int
    p50_us: float | None = None
    p99_us: float | None = None
    mean_us: float | None = None
    samples: list[float] = field(default_factory=list, repr=False)


def doorbell_latency_probe(repetitions: int) -> LatencySummary:
    """Round-trip ping-pong between this process and a forked child.

    Report-only: numbers depend on the scheduler and the host.
    """
    if repetitions <= 0:
        return LatencySummary(0)
    ping, pong = create_doorbell("ping"), create_doorbell("pong")
    pid = os.fork()
    if pid == 0:
        try:
            for _ in range(repetitions):
                ping.wait()
                pong.signal(1)
        finally:
            os._exit(0)
    samples = []
    try:
        for _ in range(repetitions):
            t0 = time.perf_counter_ns()
            ping.signal(1)
            pong.wait(timeout=10)
            samples.append((time.perf_counter_ns() - t0) / 1000.0)
    finally:
        os.waitpid(pid, 0)
        ping.close()
        pong.close()
    ordered = sorted(samples)

    def pct(q):
        return ordered[min(len(ordered) - 1, int(q * len(ordered)))]

    return LatencySummary(len(samples), pct(0.50), pct(0.99), statistics.fmean(samples), samples)
