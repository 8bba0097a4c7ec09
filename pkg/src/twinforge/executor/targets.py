"""Execution targets: local subprocess and scriptable mock, one interface.

The container/VM executors of the production setting collapse onto this
two-target abstraction; the manager only sees start/poll/stop/kill.
"""

from __future__ import annotations

import os
import signal
import subprocess
import threading
import time
from typing import Optional

from ..errors import InvalidConfig
from .jobs import JobLog


class RunningProcess:
    """What the scheduler holds for a started job."""

    def poll(self) -> Optional[int]:
        raise NotImplementedError

    def stop(self) -> None:
        """Graceful stop request; the process may ignore it."""
        raise NotImplementedError

    def kill(self) -> None:
        raise NotImplementedError


class _Subprocess(RunningProcess):
    def __init__(self, argv: list[str], cwd: str, env: dict, log: JobLog):
        self.proc = subprocess.Popen(
            argv,
            cwd=cwd,
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )
        self._readers = [
            threading.Thread(
                target=self._pump, args=(self.proc.stdout, log.stdout), daemon=True
            ),
            threading.Thread(
                target=self._pump, args=(self.proc.stderr, log.stderr), daemon=True
            ),
        ]
        for t in self._readers:
            t.start()

    @staticmethod
    def _pump(pipe, sink) -> None:
        try:
            for raw in iter(pipe.readline, b""):
                sink(raw.decode("utf-8", "replace"))
        finally:
            pipe.close()

    def _signal(self, sig: int) -> None:
        try:
            os.killpg(os.getpgid(self.proc.pid), sig)
        except (ProcessLookupError, PermissionError, OSError):
            pass

    def poll(self) -> Optional[int]:
        return self.proc.poll()

    def stop(self) -> None:
        self._signal(signal.SIGTERM)

    def kill(self) -> None:
        self._signal(signal.SIGKILL)


class ProcessTarget:
    """Spawns the DT's entry command in its prepared working directory."""

    name = "process"

    def start(self, config: dict, workdir: str, env: dict, log: JobLog) -> RunningProcess:
        command = (config.get("executor") or {}).get("command")
        if not command:
            raise InvalidConfig("process target needs executor.command (argv list)")
        full_env = dict(os.environ)
        full_env.update(env)
        return _Subprocess(command, cwd=workdir, env=full_env, log=log)


MOCK_BEHAVIORS = {"succeed", "fail", "run_forever", "ignore_stop"}


class _MockProcess(RunningProcess):
    """Wall-clock scripted stand-in for a real process."""

    def __init__(self, behavior: str, duration_s: float, exit_code: int, output, log: JobLog):
        self.behavior = behavior
        self.duration_s = duration_s
        self.exit_code = exit_code
        self.started_at = time.monotonic()
        self._stopped = False
        self._killed = False
        for line in output or []:
            log.stdout(str(line))

    def poll(self) -> Optional[int]:
        if self._killed:
            return -9
        if self._stopped and self.behavior != "ignore_stop":
            return -15
        if self.behavior in ("succeed", "fail"):
            if time.monotonic() - self.started_at >= self.duration_s:
                return 0 if self.behavior == "succeed" else self.exit_code
        return None

    def stop(self) -> None:
        self._stopped = True

    def kill(self) -> None:
        self._killed = True


class MockTarget:
    """Scripted behavior from config ``executor.mock``:

    ``{"behavior": "succeed"|"fail"|"run_forever"|"ignore_stop",
       "duration_s": num, "exit_code": int, "output": [lines]}``
    """

    name = "mock"

    def start(self, config: dict, workdir: str, env: dict, log: JobLog) -> RunningProcess:
        spec = (config.get("executor") or {}).get("mock") or {}
        behavior = spec.get("behavior", "succeed")
        if behavior not in MOCK_BEHAVIORS:
            raise InvalidConfig(f"mock behavior must be one of {sorted(MOCK_BEHAVIORS)}")
        return _MockProcess(
            behavior=behavior,
            duration_s=float(spec.get("duration_s", 0.0)),
            exit_code=int(spec.get("exit_code", 1)),
            output=spec.get("output"),
            log=log,
        )


_TARGETS = {"process": ProcessTarget(), "mock": MockTarget()}


def pick_target(config: dict):
    name = (config.get("executor") or {}).get("target")
    target = _TARGETS.get(name)
    if target is None:
        raise InvalidConfig(f"unknown executor target {name!r}")
    return target
