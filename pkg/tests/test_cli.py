import csv
import io
import subprocess

import pytest

from conftest import python_m
from shmslice.cli import build_parser, main
from shmslice.stream import oracle_count

MiB = 1 << 20


def run(*args, timeout=120):
    return subprocess.run(python_m(*args), capture_output=True, text=True, timeout=timeout)


def test_parser_defaults():
    args = build_parser().parse_args(["bench-job"])
    assert (args.workers, args.shm_size, args.target, args.mode) == (3, 64 * MiB, 0x61, "event")


def test_target_must_be_a_byte():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["bench-job", "--target", "1ff"])


def test_subcommand_required():
    with pytest.raises(SystemExit):
        main([])


def test_bench_job_csv_on_stdout():
    p = run("bench-job", "--workers", "2", "--shm-size", str(MiB), "--data", str(MiB), "--reps", "2")
    assert p.returncode == 0, p.stderr
    rows = list(csv.DictReader(io.StringIO(p.stdout)))
    assert [r["run"] for r in rows] == ["0", "1", "summary"]
    assert int(rows[-1]["total_count"]) == oracle_count(42, MiB, 0x61)


def test_manager_and_workers(tmp_path):
    sock = str(tmp_path / "m.sock")
    csv_path = tmp_path / "job.csv"
    mgr = subprocess.Popen(python_m("manager", "--socket", sock, "--workers", "2", "--shm-size", str(MiB),
                                    "--data", str(MiB), "--mode", "poll", "--csv", str(csv_path)))
    workers = [subprocess.Popen(python_m("worker", "--socket", sock, "--mode", "poll")) for _ in range(2)]
    assert mgr.wait(60) == 0
    assert [w.wait(30) for w in workers] == [0, 0]
    (row,) = csv.DictReader(open(csv_path))
    assert int(row["total_count"]) == oracle_count(42, MiB, 0x61)


def test_worker_without_socket():
    assert run("worker").returncode == 2


def test_bench_boot_reports_ratio():
    p = run("bench-boot", "--workers", "2", "--reps", "1", "--shm-size", str(MiB))
    assert p.returncode == 0, p.stderr
    rows = list(csv.DictReader(io.StringIO(p.stdout)))
    assert [(r["mode"], r["frames_or_records"]) for r in rows] == [("direct", "6"), ("distributor", "12")]
    assert "ratio=" in p.stderr and "reference 0.7" in p.stderr


def test_lat_probe():
    p = run("lat-probe", "--reps", "200")
    assert p.returncode == 0 and p.stdout.startswith("count=200 p50_us=")
    assert run("lat-probe", "--reps", "0").stdout.strip() == "count=0"
