"""Command-line entry point: ``python -m shmslice <subcommand>``.

Heavy modules (numpy, psutil) are imported by the subcommands that need
them so that worker processes start quickly.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from .signaling import SignalMode

log = logging.getLogger("shmslice")


def _hexbyte(text: str) -> int:
    value = int(text, 16)
    if not 0 <= value <= 0xFF:
        raise argparse.ArgumentTypeError(f"{text} is not a single byte")
    return value


def _add_job_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--socket", dest="socket_path", metavar="PATH")
    p.add_argument("--shm-size", type=int, default=64 << 20, metavar="BYTES")
    p.add_argument("--workers", type=int, default=3, metavar="N")
    p.add_argument("--data", type=int, default=256 << 20, metavar="BYTES")
    p.add_argument("--seed", type=int, default=42, metavar="U64")
    p.add_argument("--target", type=_hexbyte, default=0x61, metavar="HEXBYTE")
    p.add_argument("--mode", choices=["poll", "event"], default="event")
    p.add_argument("--transport", choices=["shm", "tcp"], default="shm")
    p.add_argument("--mapper-threads", type=int, default=1, metavar="N")
    p.add_argument("--reps", type=int, default=1, metavar="N")
    p.add_argument("--csv", dest="csv_path", metavar="PATH")
    p.add_argument("--persist", action="store_true")
    p.add_argument("--region-name", default="shmslice")
    p.add_argument("--delay-ms", type=float, default=0.0, metavar="N")
    p.add_argument("--iters", type=int, default=1, metavar="N")
    p.add_argument("--port-base", type=int, default=47000, metavar="N")
    p.add_argument("--timeout", type=float, default=60.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shmslice", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manager", help="create the region, admit workers, run one job")
    _add_job_flags(p)

    p = sub.add_parser("worker", help="join a manager (or distributor) and serve rounds")
    p.add_argument("--socket", dest="socket_path", metavar="PATH")
    p.add_argument("--mode", choices=["poll", "event"], default="event")
    p.add_argument("--transport", choices=["shm", "tcp"], default="shm")
    p.add_argument("--iters", type=int, default=1, metavar="N")
    p.add_argument("--port-base", type=int, default=47000, metavar="N")
    p.add_argument("--id", type=int, default=1, help="worker id (tcp transport only)")
    p.add_argument("--boot", choices=["direct", "distributor"], default="direct")
    p.add_argument("--peers", type=int, default=0, help="peer count (distributor boot only)")
    p.add_argument("--report-caps", action="store_true",
                   help="print the post-handshake capability set as JSON")
    p.add_argument("--probe-name", default="shmslice",
                   help="region name to try opening by name in --report-caps")
    p.add_argument("--timeout", type=float, default=60.0)

    p = sub.add_parser("distributor", help="central doorbell distributor (baseline)")
    p.add_argument("--socket", dest="socket_path", metavar="PATH", required=True)
    p.add_argument("--peers", type=int, required=True, metavar="P")
    p.add_argument("--shm-size", type=int, default=64 << 20, metavar="BYTES")
    p.add_argument("--timeout", type=float, default=60.0)

    p = sub.add_parser("bench-job", help="repeat end-to-end jobs and emit CSV")
    _add_job_flags(p)

    p = sub.add_parser("bench-boot", help="compare direct vs distributor startup")
    p.add_argument("--workers", type=int, default=32, metavar="N")
    p.add_argument("--reps", type=int, default=10, metavar="N")
    p.add_argument("--boot-mode", choices=["direct", "distributor", "both"], default="both")
    p.add_argument("--shm-size", type=int, default=64 << 20, metavar="BYTES")
    p.add_argument("--csv", dest="csv_path", metavar="PATH")
    p.add_argument("--timeout", type=float, default=60.0)

    p = sub.add_parser("lat-probe", help="doorbell ping-pong latency (report only)")
    p.add_argument("--reps", type=int, default=10000, metavar="N")
    return parser


def _config(args):
    from .bench import BenchConfig

    return BenchConfig(
        shm_size=args.shm_size, workers=args.workers, total_data=args.data, seed=args.seed,
        target=args.target, mode=SignalMode(args.mode), transport=args.transport,
        mapper_threads=args.mapper_threads, reps=args.reps, csv_path=args.csv_path,
        persist=args.persist, region_name=args.region_name, delay_ms=args.delay_ms,
        iters=args.iters, socket_path=args.socket_path, port_base=args.port_base,
        timeout=args.timeout,
    )


def cmd_manager(args) -> int:
    from .bench import report_row, write_csv
    from .handshake import manager_serve
    from .harness import run_mapper
    from .region import RegionConfig, create_region

    config = _config(args)
    config.validate()
    if args.transport != "shm":
        log.error("the manager subcommand drives the shm transport; use bench-job for tcp")
        return 2
    if not config.socket_path:
        log.error("--socket is required")
        return 2
    region = create_region(RegionConfig(config.shm_size, config.workers, config.persist, config.region_name))
    roster = None
    try:
        log.info("waiting for %d workers on %s", config.workers, config.socket_path)
        roster = manager_serve(config.socket_path, region, timeout=config.timeout)
        report = run_mapper(region, roster, config.job_spec(), timeout=config.timeout)
        write_csv([report_row(0, config, report)], config.csv_path)
        return 1 if report.aborted else 0
    finally:
        if roster is not None:
            roster.close()
        if config.persist:
            region.close()
        else:
            region.destroy()


def _worker_distributor(args) -> int:
    from .distributor import booted_at, peer_register
    from .region import attach_slice

    table = peer_register(args.socket_path, args.peers, timeout=args.timeout)
    fd = table.slice_fds.pop(0)
    size = os.fstat(fd).st_size
    ws = attach_slice(fd, size, table.own_id)
    print(f"ready {booted_at()} id={table.own_id}", flush=True)
    ws.close()
    table.close()
    return 0


def cmd_worker(args) -> int:
    if args.transport == "tcp":
        from .netbase import DEFAULT_HOST, run_tcp_worker

        stats = run_tcp_worker((DEFAULT_HOST, args.port_base + args.id), iters=args.iters, timeout=args.timeout)
        log.info("tcp worker %d: %d rounds, cpu %.3fs", args.id, stats.rounds, stats.cpu_time)
        return 0
    if not args.socket_path:
        log.error("--socket is required")
        return 2
    if args.boot == "distributor":
        return _worker_distributor(args)

    from .handshake import worker_join
    from .harness import run_worker

    joined = worker_join(args.socket_path, timeout=args.timeout)
    if args.report_caps:
        from .caps import capability_set, mapped_shared_bytes, openable_named
        from .errors import RangeError

        ws = joined.slice
        try:
            ws.read_payload(ws.payload_capacity, 1)
            range_error = False
        except RangeError:
            range_error = True
        report = {
            "id": ws.slice_id,
            "slice_size": ws.slice_size,
            "payload_capacity": ws.payload_capacity,
            "caps": capability_set(),
            "mapped_shared_bytes": mapped_shared_bytes(),
            "range_error_at_capacity": range_error,
            "openable_named": openable_named(args.probe_name, joined.welcome.num_workers + 1),
        }
        print(json.dumps(report), flush=True)
    stats = run_worker(joined.slice, joined.recv, joined.send, SignalMode(args.mode),
                       iters=args.iters, peer=joined.conn)
    log.info("worker %d: %d rounds, utilization %.3f", joined.slice.slice_id, stats.rounds, stats.utilization)
    return 0


def cmd_distributor(args) -> int:
    from .distributor import run_distributor
    from .region import RegionConfig, create_region

    region = create_region(RegionConfig(args.shm_size, args.peers - 1))
    try:
        records = run_distributor(args.socket_path, args.peers, region, timeout=args.timeout)
    finally:
        region.destroy()
    print(f"records {records}", flush=True)
    return 0


def cmd_bench_job(args) -> int:
    from .bench import bench_job, write_csv

    config = _config(args)
    rows, reports = bench_job(config)
    write_csv(rows, config.csv_path)
    return 0 if len(reports) == config.reps and not any(r.aborted for r in reports) else 1


def cmd_bench_boot(args) -> int:
    import statistics

    from .bench import BOOT_FIELDS, bench_boot, write_csv

    modes = ["direct", "distributor"] if args.boot_mode == "both" else [args.boot_mode]
    rows, medians = [], {}
    for mode in modes:
        reps = bench_boot(mode, args.workers, args.reps, shm_size=args.shm_size, timeout=args.timeout)
        rows.extend(r.row(i) for i, r in enumerate(reps))
        medians[mode] = statistics.median(r.wall_time for r in reps)
    write_csv(rows, args.csv_path, fields=BOOT_FIELDS)
    if len(medians) == 2:
        ratio = medians["direct"] / medians["distributor"]
        print(f"# median boot direct={medians['direct']:.4f}s distributor={medians['distributor']:.4f}s "
              f"ratio={ratio:.3f} (reference 0.7; boot here covers only the exchange protocol)",
              file=sys.stderr)
    return 0


def cmd_lat_probe(args) -> int:
    from .bench import doorbell_latency_probe

    s = doorbell_latency_probe(args.reps)
    if s.count == 0:
        print("count=0")
    else:
        print(f"count={s.count} p50_us={s.p50_us:.2f} p99_us={s.p99_us:.2f} mean_us={s.mean_us:.2f}")
    return 0


COMMANDS = {
    "manager": cmd_manager,
    "worker": cmd_worker,
    "distributor": cmd_distributor,
    "bench-job": cmd_bench_job,
    "bench-boot": cmd_bench_boot,
    "lat-probe": cmd_lat_probe,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        return 130
    finally:
        log.debug("%s finished in %.3fs", args.command, time.perf_counter() - t0)
