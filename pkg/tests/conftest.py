import os
import subprocess
import sys
import threading

import pytest

from shmslice.handshake import listen_unix, manager_serve
from shmslice.region import RegionConfig, create_region

HELPERS = os.path.join(os.path.dirname(__file__), "helpers")

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"[{status}] criterion {number}: {title}" + (f" -- {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def python_m(*args):
    return [sys.executable, "-m", "shmslice", *args]


def run_helper(name, *args, **kwargs):
    return subprocess.Popen([sys.executable, os.path.join(HELPERS, name), *args], **kwargs)


@pytest.fixture
def sock_path(tmp_path):
    return str(tmp_path / "mgr.sock")


class Served:
    """A region plus a manager_serve running in a background thread."""

    def __init__(self, endpoint, total, workers, timeout=20.0):
        self.region = create_region(RegionConfig(total, workers))
        self.listener = listen_unix(endpoint)
        self.roster = None
        self.error = None
        self._t = threading.Thread(target=self._serve, args=(endpoint, timeout), daemon=True)
        self._t.start()

    def _serve(self, endpoint, timeout):
        try:
            self.roster = manager_serve(endpoint, self.region, timeout=timeout, listener=self.listener)
        except Exception as exc:  # surfaced by wait()
            self.error = exc

    def wait(self, timeout=30.0):
        self._t.join(timeout)
        if self.error is not None:
            raise self.error
        return self.roster

    def close(self):
        if self.roster is not None:
            self.roster.close()
        self.region.destroy()


@pytest.fixture
def served(sock_path):
    made = []

    def make(total=1 << 20, workers=1, timeout=20.0):
        s = Served(sock_path, total, workers, timeout)
        made.append(s)
        return s

    yield make
    for s in made:
        try:
            s.wait(5)
        except Exception:
            pass
        s.close()
