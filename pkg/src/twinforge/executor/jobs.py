"""Execution job records, modes, and the per-job log.

Job logs are line-delimited UTF-8; every line is prefixed
``ISO8601-timestamp  [stdout|stderr|event]  `` and every status change is
recorded exactly once as a scheduler event.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Optional, Union

from ..errors import InvalidConfig


class JobStatus(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    TIMED_OUT = "timed_out"
    TERMINATED = "terminated"
    RESTARTING = "restarting"


TERMINAL_STATUSES = {
    JobStatus.SUCCEEDED,
    JobStatus.FAILED,
    JobStatus.TIMED_OUT,
    JobStatus.TERMINATED,
}


class Trigger(str, Enum):
    MANUAL = "manual"
    API_CALL = "api"
    ASSET_COMMIT = "commit"

    @classmethod
    def parse(cls, value: str) -> "Trigger":
        try:
            return cls(value)
        except ValueError:
            raise InvalidConfig(f"unknown trigger {value!r}")


@dataclass(frozen=True)
class OneOff:
    time_limit_s: float

    def __post_init__(self):
        if self.time_limit_s <= 0:
            raise InvalidConfig("oneoff time_limit_s must be positive")


@dataclass(frozen=True)
class Continuous:
    max_restarts: Optional[int] = None  # None = unlimited
    backoff_s: float = 1.0
    backoff_cap_s: float = 60.0

    def backoff_after(self, restart_count: int) -> float:
        return min(self.backoff_s * (2 ** max(restart_count - 1, 0)), self.backoff_cap_s)


ExecutionMode = Union[OneOff, Continuous]


def mode_to_dict(mode: ExecutionMode) -> dict:
    if isinstance(mode, OneOff):
        return {"kind": "oneoff", "time_limit_s": mode.time_limit_s}
    return {
        "kind": "continuous",
        "max_restarts": mode.max_restarts,
        "backoff_s": mode.backoff_s,
    }


def mode_from_dict(data: dict) -> ExecutionMode:
    if not isinstance(data, dict) or "kind" not in data:
        raise InvalidConfig("mode must be an object with a 'kind'")
    kind = data["kind"]
    if kind == "oneoff":
        limit = data.get("time_limit_s")
        if not isinstance(limit, (int, float)):
            raise InvalidConfig("oneoff mode needs numeric time_limit_s")
        return OneOff(time_limit_s=float(limit))
    if kind == "continuous":
        max_restarts = data.get("max_restarts")
        if max_restarts is not None:
            max_restarts = int(max_restarts)
        return Continuous(
            max_restarts=max_restarts,
            backoff_s=float(data.get("backoff_s", 1.0)),
        )
    raise InvalidConfig(f"unknown execution mode {kind!r}")


def mode_from_config(config: dict) -> ExecutionMode:
    """Fall back to the DT config's executor section when no explicit mode given."""
    executor = config.get("executor") or {}
    mode = executor.get("mode", "oneoff")
    if mode == "oneoff":
        return OneOff(time_limit_s=float(executor.get("time_limit_s", 60.0)))
    restart = executor.get("restart") or {}
    max_restarts = restart.get("max_restarts")
    return Continuous(
        max_restarts=int(max_restarts) if max_restarts is not None else None,
        backoff_s=float(restart.get("backoff_s", 1.0)),
    )


def new_job_id() -> str:
    return "job-" + uuid.uuid4().hex[:12]


@dataclass
class ExecutionJob:
    job_id: str
    dt_id: str
    mode: ExecutionMode
    trigger: Trigger = Trigger.MANUAL
    status: JobStatus = JobStatus.QUEUED
    submitted_at: float = field(default_factory=time.time)
    started_at: Optional[float] = None
    ended_at: Optional[float] = None
    restart_count: int = 0
    log_ref: str = ""
    exit_code: Optional[int] = None
    owner: Optional[str] = None
    trial: bool = False
    diagnostics: list = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return self.status in TERMINAL_STATUSES

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "dt_id": self.dt_id,
            "mode": mode_to_dict(self.mode),
            "trigger": self.trigger.value,
            "status": self.status.value,
            "submitted_at": self.submitted_at,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "restart_count": self.restart_count,
            "log_ref": self.log_ref,
            "exit_code": self.exit_code,
            "owner": self.owner,
            "trial": self.trial,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExecutionJob":
        return cls(
            job_id=data["job_id"],
            dt_id=data["dt_id"],
            mode=mode_from_dict(data["mode"]),
            trigger=Trigger.parse(data.get("trigger", "manual")),
            status=JobStatus(data["status"]),
            submitted_at=data["submitted_at"],
            started_at=data.get("started_at"),
            ended_at=data.get("ended_at"),
            restart_count=int(data.get("restart_count", 0)),
            log_ref=data.get("log_ref", ""),
            exit_code=data.get("exit_code"),
            owner=data.get("owner"),
            trial=bool(data.get("trial", False)),
            diagnostics=list(data.get("diagnostics", [])),
        )


def _iso_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class JobLog:
    """Append-only per-job log with the stream-tagged line format."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, stream: str, text: str) -> None:
        text = text.rstrip("\n")
        line = f"{_iso_now()}  [{stream}]  {text}\n"
        with self._lock:
            if not self._fh.closed:
                self._fh.write(line)
                self._fh.flush()

    def stdout(self, text: str) -> None:
        self.write("stdout", text)

    def stderr(self, text: str) -> None:
        self.write("stderr", text)

    def event(self, text: str) -> None:
        self.write("event", text)

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()

    def read_lines(self) -> list[str]:
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()
        if not self.path.exists():
            return []
        return self.path.read_text(encoding="utf-8").splitlines()
