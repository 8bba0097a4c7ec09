"""Manager-worker job scheduling: FIFO assignment, time limits, restart policy.

A single logical scheduler thread ticks over the queue and the running set.
Workers execute jobs concurrently up to their capacity and report liveness via
heartbeats; three missed beats fail the worker's jobs. OneOff jobs are stopped
at their time limit (graceful stop, force-kill after a grace window);
Continuous jobs re-queue on failure under their restart policy with
exponential backoff.
"""

from __future__ import annotations

import json
import shutil
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

from ..errors import AlreadyFinished, NotFound, TwinError
from .jobs import (
    Continuous,
    ExecutionJob,
    JobLog,
    JobStatus,
    OneOff,
    TERMINAL_STATUSES,
    Trigger,
    new_job_id,
)
from .targets import RunningProcess, pick_target

HEARTBEAT_MISSES = 3
ONEOFF_KILL_GRACE_S = 5.0


class Worker:
    """In-process worker: capacity slots plus a liveness heartbeat."""

    def __init__(self, worker_id: str, capacity: int, heartbeat_interval_s: float):
        self.worker_id = worker_id
        self.capacity = capacity
        self.current_jobs: set[str] = set()
        self.heartbeat_at = time.monotonic()
        self.alive = True
        self._interval = heartbeat_interval_s
        self._stop = threading.Event()
        self._thread = threading.Thread(
            target=self._beat, daemon=True, name=f"hb-{worker_id}"
        )
        self._thread.start()

    def _beat(self) -> None:
        while not self._stop.wait(self._interval / 2):
            self.heartbeat_at = time.monotonic()

    def stop_heartbeat(self) -> None:
        """Simulate worker death: the beat stops, the manager notices."""
        self._stop.set()

    @property
    def free_slots(self) -> int:
        return self.capacity - len(self.current_jobs)


@dataclass
class ManagerHooks:
    """Callbacks wiring the scheduler into lifecycle, registry, and broker."""

    permits_execute: Callable[[str], None] = lambda dt_id: None
    on_job_start: Callable[[str], None] = lambda dt_id: None
    on_terminate: Callable[[str], None] = lambda dt_id: None
    pt_publish: Callable[[str, bytes], None] = lambda dt_id, payload: None
    materialize: Callable[[object], list] = lambda definition: []
    resolve_snapshot: Callable[[str], bytes] = lambda key: b""
    job_env: Callable[[object], dict] = lambda definition: {}


@dataclass
class _Running:
    proc: RunningProcess
    worker: Worker
    deadline: Optional[float] = None  # monotonic, OneOff only
    terminating: bool = False


@dataclass
class _Zombie:
    proc: RunningProcess
    kill_at: float


class JobManager:
    def __init__(
        self,
        data_dir: str | Path,
        hooks: Optional[ManagerHooks] = None,
        log=None,
        tick_s: float = 0.02,
        heartbeat_interval_s: float = 1.0,
        oneoff_kill_grace_s: float = ONEOFF_KILL_GRACE_S,
    ):
        self.data_dir = Path(data_dir)
        self.hooks = hooks or ManagerHooks()
        self.log = log
        self.tick_s = tick_s
        self.heartbeat_interval_s = heartbeat_interval_s
        self.oneoff_kill_grace_s = oneoff_kill_grace_s
        self.jobs: dict[str, ExecutionJob] = {}
        self.workers: dict[str, Worker] = {}
        self._definitions: dict[str, object] = {}  # job_id -> DTDefinition
        self._queue: list[str] = []
        self._running: dict[str, _Running] = {}
        self._backoff_until: dict[str, float] = {}
        self._zombies: list[_Zombie] = []
        self._logs: dict[str, JobLog] = {}
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.capacity_violations: list[str] = []
        if log is not None:
            self._replay()

    # -- persistence ---------------------------------------------------------

    def _replay(self) -> None:
        interrupted = []
        for rec in self.log.replay():
            if rec["event"] == "submitted":
                job = ExecutionJob.from_dict(rec["job"])
                self.jobs[job.job_id] = job
            elif rec["event"] == "status":
                job = self.jobs.get(rec["job_id"])
                if job is None:
                    continue
                job.status = JobStatus(rec["status"])
                job.restart_count = rec.get("restart_count", job.restart_count)
                job.started_at = rec.get("started_at", job.started_at)
                job.ended_at = rec.get("ended_at", job.ended_at)
                job.exit_code = rec.get("exit_code", job.exit_code)
        for job in self.jobs.values():
            if not job.terminal:
                # The process did not survive the restart; record the fact.
                job.status = JobStatus.FAILED
                job.ended_at = time.time()
                job.diagnostics.append("interrupted by instance restart")
                interrupted.append(job)
        for job in interrupted:
            self._persist_status(job)
            self._job_log(job).event("status failed (interrupted by instance restart)")

    def _persist_submit(self, job: ExecutionJob) -> None:
        if self.log is not None:
            self.log.append({"event": "submitted", "job": job.to_dict()})

    def _persist_status(self, job: ExecutionJob) -> None:
        if self.log is not None:
            self.log.append(
                {
                    "event": "status",
                    "job_id": job.job_id,
                    "status": job.status.value,
                    "restart_count": job.restart_count,
                    "started_at": job.started_at,
                    "ended_at": job.ended_at,
                    "exit_code": job.exit_code,
                    "ts": time.time(),
                }
            )

    # -- lifecycle of the manager itself --------------------------------------

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, daemon=True, name="job-manager")
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
            self._thread = None
        with self._lock:
            for state in self._running.values():
                state.proc.kill()
            for worker in self.workers.values():
                worker.stop_heartbeat()
            for log in self._logs.values():
                log.close()

    def add_worker(self, capacity: int = 4, worker_id: Optional[str] = None) -> Worker:
        worker = Worker(
            worker_id or ("wrk-" + uuid.uuid4().hex[:8]),
            capacity,
            self.heartbeat_interval_s,
        )
        with self._lock:
            self.workers[worker.worker_id] = worker
        return worker

    # -- operations ------------------------------------------------------------

    def submit(
        self,
        definition,
        mode,
        trigger: Trigger = Trigger.MANUAL,
        owner: Optional[str] = None,
        trial: bool = False,
        workdir_root: Optional[Path] = None,
    ) -> ExecutionJob:
        if not trial:
            self.hooks.permits_execute(definition.dt_id)
        job = ExecutionJob(
            job_id=new_job_id(),
            dt_id=definition.dt_id,
            mode=mode,
            trigger=trigger,
            owner=owner,
            trial=trial,
        )
        root = workdir_root or (self.data_dir / "jobs" / job.job_id)
        job.log_ref = str(root / "job.log")
        if not any(w.alive for w in self.workers.values()):
            job.diagnostics.append("no registered workers; job stays queued")
        # Log and persist before the scheduler can see the job, so the queued
        # event always precedes the running one.
        log = self._job_log(job)
        log.event(f"status queued (trigger {job.trigger.value})")
        for diag in job.diagnostics:
            log.event(f"warning: {diag}")
        self._persist_submit(job)
        with self._lock:
            self.jobs[job.job_id] = job
            self._definitions[job.job_id] = definition
            self._queue.append(job.job_id)
            self._queue.sort(key=lambda j: (self.jobs[j].submitted_at, j))
        return job

    def get_job(self, job_id: str) -> ExecutionJob:
        with self._lock:
            job = self.jobs.get(job_id)
        if job is None:
            raise NotFound(f"job {job_id} not found")
        return job

    def list_jobs(self, dt_id: Optional[str] = None) -> list[ExecutionJob]:
        with self._lock:
            jobs = list(self.jobs.values())
        if dt_id is not None:
            jobs = [j for j in jobs if j.dt_id == dt_id]
        return sorted(jobs, key=lambda j: j.submitted_at)

    def terminate_job(self, job_id: str, grace_s: float = 5.0) -> ExecutionJob:
        job = self.get_job(job_id)
        with self._lock:
            if job.terminal:
                raise AlreadyFinished(f"job {job_id} already {job.status.value}")
            state = self._running.get(job_id)
            if state is not None:
                state.terminating = True
            if job_id in self._queue:
                self._queue.remove(job_id)
            self._backoff_until.pop(job_id, None)

        # Tell the PT this DT is going away, before anything is stopped.
        try:
            self.hooks.pt_publish(
                job.dt_id,
                json.dumps({"event": "terminating", "dt_id": job.dt_id, "job_id": job_id}).encode(),
            )
            self._job_log(job).event("terminating message published on pt channel")
        except TwinError as exc:
            self._job_log(job).event(f"pt terminating message failed: {exc.message}")

        if state is not None:
            state.proc.stop()
            deadline = time.monotonic() + grace_s
            forced = False
            while state.proc.poll() is None:
                if time.monotonic() >= deadline:
                    state.proc.kill()
                    forced = True
                    break
                time.sleep(0.01)
            # Allow the kill to land before declaring the job gone.
            kill_wait = time.monotonic() + 2.0
            while state.proc.poll() is None and time.monotonic() < kill_wait:
                time.sleep(0.01)
            with self._lock:
                self._release(job_id)
            if forced:
                self._job_log(job).event(f"force-killed after grace {grace_s}s")

        self._set_status(job, JobStatus.TERMINATED, note=f"grace {grace_s}s")
        job.ended_at = time.time()
        self._persist_status(job)
        if not job.trial:
            try:
                self.hooks.on_terminate(job.dt_id)
            except TwinError as exc:
                self._job_log(job).event(f"lifecycle terminate skipped: {exc.message}")
        return job

    def fetch_logs(self, job_id: str, follow: bool = False) -> Iterator[str]:
        job = self.get_job(job_id)
        path = Path(job.log_ref)
        pos = 0

        def drain():
            nonlocal pos
            if not path.exists():
                return []
            with open(path, "rb") as fh:
                fh.seek(pos)
                chunk = fh.read()
            # Consume only whole lines; a partially written tail waits.
            cut = chunk.rfind(b"\n")
            if cut < 0:
                return []
            pos += cut + 1
            return chunk[: cut + 1].decode("utf-8").splitlines()

        while True:
            yield from drain()
            if not follow or job.terminal:
                yield from drain()  # final drain catches the terminal event
                return
            time.sleep(0.05)

    def scheduler_snapshot(self) -> dict:
        with self._lock:
            return {
                "queue": list(self._queue),
                "workers": {
                    w.worker_id: {
                        "capacity": w.capacity,
                        "jobs": sorted(w.current_jobs),
                        "alive": w.alive,
                    }
                    for w in self.workers.values()
                },
                "running": sorted(self._running),
            }

    # -- scheduler loop ----------------------------------------------------------

    def _loop(self) -> None:
        while not self._stop.wait(self.tick_s):
            try:
                self._tick()
            except Exception:  # the loop absorbs and keeps scheduling
                import traceback

                traceback.print_exc()

    def _tick(self) -> None:
        now = time.monotonic()
        with self._lock:
            self._check_heartbeats(now)
            self._poll_running(now)
            self._release_backoffs(now)
            self._assign(now)
            self._reap(now)
            for w in self.workers.values():
                if len(w.current_jobs) > w.capacity:
                    self.capacity_violations.append(
                        f"{w.worker_id}: {len(w.current_jobs)} > {w.capacity}"
                    )

    def _check_heartbeats(self, now: float) -> None:
        limit = HEARTBEAT_MISSES * self.heartbeat_interval_s
        for worker in self.workers.values():
            if worker.alive and now - worker.heartbeat_at > limit:
                worker.alive = False
                for job_id in list(worker.current_jobs):
                    job = self.jobs[job_id]
                    state = self._running.pop(job_id, None)
                    if state is not None:
                        state.proc.kill()
                    worker.current_jobs.discard(job_id)
                    job.exit_code = None
                    job.ended_at = time.time()
                    self._set_status(
                        job,
                        JobStatus.FAILED,
                        note=f"worker {worker.worker_id} missed {HEARTBEAT_MISSES} heartbeats",
                    )
                    self._persist_status(job)

    def _poll_running(self, now: float) -> None:
        for job_id, state in list(self._running.items()):
            if state.terminating:
                continue
            job = self.jobs[job_id]
            exit_code = state.proc.poll()
            if exit_code is None:
                if state.deadline is not None and now >= state.deadline:
                    # OneOff over its limit: flip status now, reap asynchronously.
                    self._release(job_id)
                    state.proc.stop()
                    self._zombies.append(
                        _Zombie(proc=state.proc, kill_at=now + self.oneoff_kill_grace_s)
                    )
                    job.ended_at = time.time()
                    job.exit_code = None
                    self._set_status(
                        job,
                        JobStatus.TIMED_OUT,
                        note=f"limit {job.mode.time_limit_s}s exceeded",
                    )
                    self._persist_status(job)
                continue

            self._release(job_id)
            job.exit_code = exit_code
            if isinstance(job.mode, OneOff):
                job.ended_at = time.time()
                if exit_code == 0:
                    self._set_status(job, JobStatus.SUCCEEDED)
                else:
                    self._set_status(job, JobStatus.FAILED, note=f"exit {exit_code}")
                self._persist_status(job)
            else:
                policy: Continuous = job.mode
                if policy.max_restarts is None or job.restart_count < policy.max_restarts:
                    job.restart_count += 1
                    backoff = policy.backoff_after(job.restart_count)
                    self._backoff_until[job_id] = now + backoff
                    self._set_status(
                        job,
                        JobStatus.RESTARTING,
                        note=(
                            f"exit {exit_code}; restart {job.restart_count}"
                            + ("" if policy.max_restarts is None else f"/{policy.max_restarts}")
                            + f", backoff {backoff:.3g}s"
                        ),
                    )
                    self._persist_status(job)
                else:
                    job.ended_at = time.time()
                    self._set_status(
                        job,
                        JobStatus.FAILED,
                        note=f"exit {exit_code}; restart budget {policy.max_restarts} exhausted",
                    )
                    self._persist_status(job)

    def _release_backoffs(self, now: float) -> None:
        for job_id, until in list(self._backoff_until.items()):
            if now >= until:
                del self._backoff_until[job_id]
                job = self.jobs[job_id]
                self._set_status(job, JobStatus.QUEUED, note="re-queued after backoff")
                self._persist_status(job)
                self._queue.append(job_id)
                self._queue.sort(key=lambda j: (self.jobs[j].submitted_at, j))

    def _assign(self, now: float) -> None:
        while self._queue:
            job_id = self._queue[0]
            worker = next(
                (w for w in self.workers.values() if w.alive and w.free_slots > 0), None
            )
            if worker is None:
                return
            self._queue.pop(0)
            job = self.jobs[job_id]
            definition = self._definitions.get(job_id)
            try:
                proc = self._start_process(job, definition)
            except Exception as exc:
                job.ended_at = time.time()
                message = getattr(exc, "message", str(exc))
                self._set_status(job, JobStatus.FAILED, note=f"start failed: {message}")
                self._persist_status(job)
                continue
            worker.current_jobs.add(job_id)
            deadline = None
            if isinstance(job.mode, OneOff):
                deadline = now + job.mode.time_limit_s
            self._running[job_id] = _Running(proc=proc, worker=worker, deadline=deadline)
            if job.started_at is None:
                job.started_at = time.time()
            self._set_status(job, JobStatus.RUNNING, note=f"worker {worker.worker_id}")
            self._persist_status(job)
            if not job.trial:
                try:
                    self.hooks.on_job_start(job.dt_id)
                except TwinError as exc:
                    self._job_log(job).event(f"lifecycle execute hook: {exc.message}")

    def _start_process(self, job: ExecutionJob, definition) -> RunningProcess:
        config = getattr(definition, "config", {}) or {}
        workdir = self._prepare_workdir(job, definition, config)
        env = {
            "DT_ID": job.dt_id,
            "JOB_ID": job.job_id,
            "DT_CONFIG_PATH": str(Path(workdir) / "config.json"),
        }
        env.update(self.hooks.job_env(definition))
        target = pick_target(config)
        return target.start(config, workdir, env, self._job_log(job))

    def _prepare_workdir(self, job: ExecutionJob, definition, config: dict) -> str:
        workdir = Path(job.log_ref).parent / "work"
        if workdir.exists():
            return str(workdir)  # restarts reuse the prepared directory
        workdir.mkdir(parents=True)
        for name, payload in self.hooks.materialize(definition):
            asset_dir = workdir / "assets" / name
            asset_dir.mkdir(parents=True, exist_ok=True)
            (asset_dir / "payload").write_bytes(payload)
        (workdir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
        seed_key = (config.get("executor") or {}).get("seed_snapshot")
        if seed_key:
            (workdir / "seed_snapshot").write_bytes(self.hooks.resolve_snapshot(seed_key))
        return str(workdir)

    def _reap(self, now: float) -> None:
        for zombie in list(self._zombies):
            if zombie.proc.poll() is not None:
                self._zombies.remove(zombie)
            elif now >= zombie.kill_at:
                zombie.proc.kill()

    def _release(self, job_id: str) -> None:
        state = self._running.pop(job_id, None)
        if state is not None:
            state.worker.current_jobs.discard(job_id)

    def _set_status(self, job: ExecutionJob, status: JobStatus, note: str = "") -> None:
        job.status = status
        suffix = f" ({note})" if note else ""
        self._job_log(job).event(f"status {status.value}{suffix}")

    def _job_log(self, job: ExecutionJob) -> JobLog:
        log = self._logs.get(job.job_id)
        if log is None:
            log = JobLog(job.log_ref)
            self._logs[job.job_id] = log
        return log

    def cleanup_workdir(self, job_id: str) -> None:
        job = self.get_job(job_id)
        workdir = Path(job.log_ref).parent / "work"
        if workdir.exists():
            shutil.rmtree(workdir, ignore_errors=True)
