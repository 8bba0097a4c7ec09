"""Shared fixtures: in-process instances, live HTTP services, spawned CLIs.

The terminal summary prints one PASS/FAIL line per acceptance criterion so a
full run ends with a readable scorecard.
"""

from __future__ import annotations

import os
import re
import signal
import subprocess
import sys
import time
import uuid
from pathlib import Path

import pytest

from twinforge.backend import Backend, BackendServer
from twinforge.client import TwinClient
from twinforge.instance import TwinInstance
from twinforge.service import TwinService

FIXTURES = Path(__file__).parent / "fixtures"
ECHO_DT = FIXTURES / "echo_dt.py"


# -- generic helpers -----------------------------------------------------------


def wait_until(predicate, timeout=5.0, interval=0.02, message="condition"):
    """Poll until predicate() is truthy; fail the test on timeout."""
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise AssertionError(f"timed out after {timeout}s waiting for {message}")


def mock_config(behavior="succeed", duration_s=0.05, mode="oneoff", *,
                time_limit_s=5.0, restart=None, channels=None, exit_code=1,
                extra=None):
    """A minimal valid DT config around the scriptable mock executor."""
    executor = {
        "target": "mock",
        "mode": mode,
        "mock": {"behavior": behavior, "duration_s": duration_s, "exit_code": exit_code},
    }
    if mode == "oneoff":
        executor["time_limit_s"] = time_limit_s
    if restart is not None:
        executor["restart"] = restart
    config = {
        "executor": executor,
        "channels": channels
        if channels is not None
        else [{"role": "pt", "topic": "pt.test.state", "direction": "out"}],
    }
    if extra:
        config.update(extra)
    return config


# -- in-process instances --------------------------------------------------------


@pytest.fixture
def make_instance(tmp_path):
    """Factory for started TwinInstances, each in its own data dir."""
    created = []

    def build(name="inst", *, start=True, **overrides):
        config = {
            "data_dir": str(tmp_path / name),
            "superuser_token": f"sek-{name}",
            "instance_id": f"{name}-{uuid.uuid4().hex[:6]}",
        }
        config.update(overrides)
        instance = TwinInstance(config)
        if start:
            instance.start()
        created.append(instance)
        return instance

    yield build
    for instance in created:
        try:
            instance.stop()
        except Exception:
            pass


@pytest.fixture
def instance(make_instance):
    return make_instance("main")


@pytest.fixture
def service(instance):
    svc = TwinService(instance).start()
    yield svc
    svc.stop()


@pytest.fixture
def admin(service):
    """Client authenticated as the instance superuser."""
    return TwinClient(service.url, token=service.instance.config["superuser_token"])


@pytest.fixture
def backend_server(tmp_path):
    server = BackendServer(Backend(tmp_path / "hub", backend_id="hub")).start()
    yield server
    server.stop()


# -- spawned processes (CLI integration) -------------------------------------------


def spawn_cli(args, env=None, cwd=None):
    """Start a twinforge CLI process with binary stderr for banner parsing."""
    return subprocess.Popen(
        [sys.executable, "-m", "twinforge.cli", *args],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.PIPE,
        env=env or dict(os.environ),
        cwd=cwd,
    )


def wait_banner(proc, pattern, timeout=15.0):
    """Read a spawned server's stderr until the startup banner matches."""
    os.set_blocking(proc.stderr.fileno(), False)
    deadline = time.monotonic() + timeout
    buf = b""
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            raise AssertionError(
                f"process exited {proc.returncode} before banner; stderr: {buf!r}"
            )
        chunk = proc.stderr.read()
        if chunk:
            buf += chunk
            m = re.search(pattern, buf.decode("utf-8", "replace"))
            if m:
                return m
        time.sleep(0.02)
    raise AssertionError(f"no banner matching {pattern!r} within {timeout}s; got {buf!r}")


def stop_proc(proc, timeout=5.0):
    if proc.poll() is None:
        proc.send_signal(signal.SIGTERM)
        try:
            proc.wait(timeout)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait(timeout)


# -- acceptance scorecard -----------------------------------------------------------

_CRITERION_RE = re.compile(r"test_criterion_(\d+)_(\w+)")
_criterion_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION_RE.search(report.nodeid)
    if not m:
        return
    number, label = int(m.group(1)), m.group(2).replace("_", " ")
    if report.when == "call":
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _criterion_results[number] = (outcome, label)
    elif report.when in ("setup", "teardown") and report.failed:
        _criterion_results[number] = ("FAIL", label)
    elif report.when == "setup" and report.skipped and number not in _criterion_results:
        _criterion_results[number] = ("SKIP", label)


def pytest_terminal_summary(terminalreporter):
    if not _criterion_results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criterion_results):
        outcome, label = _criterion_results[number]
        terminalreporter.write_line(f"[criterion {number}] {outcome}  {label}")
