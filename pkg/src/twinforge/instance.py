"""One running service instance: wiring, authorization, and recovery.

An instance owns a registry, a twin manager, a job manager, a federation
layer, and a broker connection, all rooted in one data directory. Every
mutation lands in an append-only record log before it is acknowledged, so a
process restart rebuilds the same state by replay; jobs that were mid-flight
when the process died are marked failed rather than resurrected.

Management operations are refused with a not-manager error when the twin is
known to live on a different instance. That knowledge comes from twin
announcements exchanged over the shared broker.
"""

from __future__ import annotations

import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .blobstore import BlobStore
from .composer import DTManager, validate_config
from .errors import (
    IllegalTransition,
    InvalidConfig,
    NotFound,
    NotManager,
    TwinError,
    Unauthorized,
    Unreachable,
)
from .executor import JobManager, ManagerHooks, Trigger, mode_from_config
from .executor.jobs import OneOff
from .federation import Federation
from .lifecycle import Phase, LifecycleSpec
from .messaging import Broker, BrokerClient, bind_channels
from .recordlog import RecordLog
from .registry import Registry

logger = logging.getLogger(__name__)

DEFAULT_WORKER_CAPACITY = 8
TRIAL_TIME_LIMIT_S = 30.0


@dataclass
class TrialDefinition:
    """Just enough definition for the job manager to run a workspace trial."""

    dt_id: str
    owner: str
    config: dict
    asset_refs: tuple = ()


@dataclass
class Metric:
    dt_id: str
    name: str
    value: float
    ts: float
    labels: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dt_id": self.dt_id,
            "name": self.name,
            "value": self.value,
            "ts": self.ts,
            "labels": self.labels,
        }


class TwinInstance:
    def __init__(self, config: dict):
        self.config = config
        self.instance_id = config.get("instance_id") or ("inst-" + uuid.uuid4().hex[:8])
        self.data_dir = Path(config["data_dir"])
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._logs: dict[str, RecordLog] = {}

        self.blobs = BlobStore(self.data_dir)
        self.federation = Federation(
            registry=None,  # set right after the registry exists
            blobs=self.blobs,
            instance_id=self.instance_id,
            log=self._log("federation"),
        )
        self.registry = Registry(
            self.blobs,
            log=self._log("catalog"),
            remote_provider=lambda: [r for _, r in self.federation.remote_records()],
        )
        self.federation.registry = self.registry
        self.dts = DTManager(
            self.registry,
            self.instance_id,
            data_dir=self.data_dir,
            log=self._log("dts"),
            remote_lookup=self.federation.remote_lookup,
            remote_payload=self.federation.remote_payload,
        )

        # Users: the superuser comes from config, the rest from the log.
        self._tokens: dict[str, str] = {}
        self._users: set[str] = set()
        superuser = config.get("superuser_token")
        if superuser:
            self._tokens[superuser] = "admin"
            self._users.add("admin")
        self._user_log = self._log("users")
        for rec in self._user_log.replay():
            if rec.get("event") == "user":
                self._tokens[rec["token"]] = rec["name"]
                self._users.add(rec["name"])
                self._workspace(rec["name"]).mkdir(parents=True, exist_ok=True)

        self._metrics: dict[str, list[Metric]] = {}
        self._metric_log = self._log("metrics")
        for rec in self._metric_log.replay():
            if rec.get("event") == "metric":
                m = Metric(rec["dt_id"], rec["name"], rec["value"], rec["ts"], rec.get("labels", {}))
                self._metrics.setdefault(m.dt_id, []).append(m)

        self._setup_broker(config.get("broker") or {})
        self.federation.attach_broker(self.broker_client)

        self.jobs = JobManager(
            self.data_dir,
            hooks=ManagerHooks(
                permits_execute=self._permits_execute,
                on_job_start=self._on_job_start,
                on_terminate=self._on_job_terminate,
                pt_publish=self.pt_publish,
                materialize=self._materialize,
                resolve_snapshot=self._resolve_snapshot,
                job_env=self._job_env,
            ),
            log=self._log("jobs"),
        )
        self.jobs.add_worker(capacity=int(config.get("worker_capacity", DEFAULT_WORKER_CAPACITY)))

        self._channel_sets: dict[str, object] = {}
        self._channel_lock = threading.Lock()

        linked_endpoints = {l.endpoint for l in self.federation.links.values()}
        for entry in config.get("backends", []):
            endpoint = entry["endpoint"].rstrip("/")
            if endpoint in linked_endpoints:
                continue  # replay already restored this link
            try:
                self.federation.link_backend(
                    endpoint,
                    token=entry.get("token"),
                    sync_interval_s=float(entry.get("sync_interval_s", 0) or 0),
                )
            except TwinError as exc:
                logger.warning("backend at %s not linked at startup: %s", endpoint, exc.message)

    # -- plumbing ---------------------------------------------------------------

    def _log(self, name: str) -> RecordLog:
        log = self._logs.get(name)
        if log is None:
            log = RecordLog(self.data_dir / f"{name}.log")
            self._logs[name] = log
        return log

    def _setup_broker(self, broker_cfg: dict) -> None:
        self.broker: Optional[Broker] = None
        if "connect" in broker_cfg:
            address = str(broker_cfg["connect"])
        else:
            listen = str(broker_cfg.get("listen", "127.0.0.1:0"))
            if ":" in listen:
                host, _, port = listen.rpartition(":")
            else:
                host, port = "127.0.0.1", listen
            self.broker = Broker()
            listener = self.broker.serve(host or "127.0.0.1", int(port))
            address = f"{host or '127.0.0.1'}:{listener.port}"
        self.broker_address = address
        last: Optional[Exception] = None
        for _ in range(25):  # the peer instance may still be coming up
            try:
                self.broker_client = BrokerClient(address, client_id=self.instance_id)
                return
            except Unreachable as exc:
                last = exc
                time.sleep(0.2)
        raise last

    def start(self) -> "TwinInstance":
        self.jobs.start()
        self.federation.start_auto_sync()
        return self

    def stop(self) -> None:
        self.jobs.stop()
        self.federation.close()
        with self._channel_lock:
            for cs in self._channel_sets.values():
                try:
                    cs.close(self.broker_client)
                except (TwinError, OSError):
                    pass
            self._channel_sets.clear()
        self.broker_client.close()
        if self.broker is not None:
            self.broker.close()
        for log in self._logs.values():
            log.close()

    # -- auth and users -----------------------------------------------------------

    def authenticate(self, token: Optional[str]) -> str:
        user = self._tokens.get(token or "")
        if user is None:
            raise Unauthorized("missing or unknown bearer token")
        return user

    def create_user(self, requester: str, name: str) -> dict:
        if requester != "admin":
            raise NotManager("only the superuser may create users")
        if not name or name in self._users:
            raise InvalidConfig(f"user name {name!r} is empty or taken")
        token = "tok-" + uuid.uuid4().hex
        self._tokens[token] = name
        self._users.add(name)
        self._workspace(name).mkdir(parents=True, exist_ok=True)
        self._user_log.append(
            {"event": "user", "name": name, "token": token, "created_at": time.time()}
        )
        return {"name": name, "token": token, "workspace": str(self._workspace(name))}

    def _workspace(self, user: str) -> Path:
        return self.data_dir / "workspaces" / user

    # -- twin management ------------------------------------------------------------

    def ensure_manager(self, dt_id: str) -> None:
        try:
            self.dts.entry(dt_id)
            return
        except NotFound:
            pass
        instance = self.federation.managing_instance(dt_id)
        if instance is not None and instance != self.instance_id:
            raise NotManager(f"dt {dt_id} is managed by instance {instance}")
        raise NotFound(f"dt {dt_id} not found")

    def compose_dt(self, owner: str, name: str, refs: list, config: dict,
                   lifecycle: LifecycleSpec) -> dict:
        peers = tuple(config.get("peers") or ())
        if peers:
            self.federation.check_peers(peers, {e.definition.dt_id for e in self.dts.list()})
        definition = self.dts.compose_dt(owner, name, refs, config, lifecycle)
        if peers:
            self.dts.set_peers(definition.dt_id, list(peers))
        self.federation.announce_twin(definition, peers)
        return self.describe_dt(definition.dt_id)

    def reconfigure_dt(self, dt_id: str, new_config: dict, requester: str,
                       new_refs: Optional[list] = None) -> dict:
        self.ensure_manager(dt_id)
        definition = self.dts.reconfigure_dt(dt_id, new_config, requester, new_refs)
        with self._channel_lock:
            self._channel_sets.pop(dt_id, None)  # channels may have changed
        return self.describe_dt(definition.dt_id)

    def transition_dt(self, dt_id: str, target: Phase, requester: str) -> dict:
        self.ensure_manager(dt_id)
        entry = self.dts.entry(dt_id)
        if entry.definition.owner != requester:
            raise NotManager(f"{requester} does not own dt {dt_id}")
        self.dts.transition(dt_id, target)
        return self.describe_dt(dt_id)

    def set_peers(self, dt_id: str, peers: list, requester: str) -> dict:
        self.ensure_manager(dt_id)
        entry = self.dts.entry(dt_id)
        if entry.definition.owner != requester:
            raise NotManager(f"{requester} does not own dt {dt_id}")
        self.federation.check_peers(
            tuple(peers), {e.definition.dt_id for e in self.dts.list()}
        )
        self.dts.set_peers(dt_id, peers)
        self.federation.announce_twin(entry.definition, tuple(peers))
        return self.describe_dt(dt_id)

    def describe_dt(self, dt_id: str) -> dict:
        entry = self.dts.entry(dt_id)
        with entry.lock:
            doc = entry.definition.to_dict()
            doc["state"] = entry.state.to_dict()
            doc["allowed_transitions"] = sorted(p.value for p in self.dts.allowed(dt_id))
            doc["peers"] = list(entry.peers)
            doc["revision"] = entry.revisions[-1]["rev"]
        return doc

    def list_dts(self) -> list[dict]:
        local = sorted(self.dts.list(), key=lambda e: e.definition.created_at)
        out = [self.describe_dt(e.definition.dt_id) for e in local]
        local_ids = {e.definition.dt_id for e in local}
        with self.federation._lock:
            shadows = list(self.federation.twins.values())
        for shadow in shadows:
            if shadow.dt_id in local_ids or shadow.instance == self.instance_id:
                continue
            doc = shadow.to_dict()
            doc["remote"] = True
            out.append(doc)
        return out

    # -- job glue --------------------------------------------------------------------

    def submit_job(self, dt_id: str, requester: str, trigger: str = "api",
                   mode_override: Optional[dict] = None) -> dict:
        self.ensure_manager(dt_id)
        entry = self.dts.entry(dt_id)
        if entry.definition.owner != requester:
            raise NotManager(f"{requester} does not own dt {dt_id}")
        definition = entry.definition
        if mode_override:
            # Same twin, overridden run parameters for this job only.
            config = dict(definition.config)
            executor = dict(config.get("executor") or {})
            executor.update(mode_override)
            config["executor"] = executor
            definition = TrialDefinition(
                dt_id=dt_id,
                owner=requester,
                config=config,
                asset_refs=entry.definition.asset_refs,
            )
        mode = mode_from_config(definition.config)
        job = self.jobs.submit(
            definition,
            mode,
            trigger=Trigger.parse(trigger),
            owner=requester,
        )
        return job.to_dict()

    def trial_run(self, user: str, config: dict) -> dict:
        diags = validate_config(config)
        if diags:
            raise InvalidConfig("config failed validation", diagnostics=diags)
        executor = config.get("executor") or {}
        if executor.get("mode", "oneoff") != "oneoff":
            raise InvalidConfig("trial runs are one-off only")
        trial_id = "trial-" + uuid.uuid4().hex[:12]
        definition = TrialDefinition(dt_id=trial_id, owner=user, config=config)
        mode = OneOff(time_limit_s=float(executor.get("time_limit_s", TRIAL_TIME_LIMIT_S)))
        job = self.jobs.submit(
            definition,
            mode,
            trigger=Trigger.API_CALL,
            owner=user,
            trial=True,
            workdir_root=self._workspace(user) / trial_id,
        )
        return job.to_dict()

    def _permits_execute(self, dt_id: str) -> None:
        self.ensure_manager(dt_id)
        entry = self.dts.entry(dt_id)
        current = entry.state.current
        if current == Phase.EXECUTE:
            return  # already executing; extra jobs are allowed
        if Phase.EXECUTE not in self.dts.allowed(dt_id):
            name = current.value if isinstance(current, Phase) else current
            raise IllegalTransition(f"cannot start executing from phase {name!r}")

    def _on_job_start(self, dt_id: str) -> None:
        entry = self.dts.entry(dt_id)
        if entry.state.current == Phase.EXECUTE:
            return
        self.dts.transition(dt_id, Phase.EXECUTE)

    def _on_job_terminate(self, dt_id: str) -> None:
        entry = self.dts.entry(dt_id)
        if entry.state.current == Phase.TERMINATE:
            return
        if Phase.TERMINATE in self.dts.allowed(dt_id):
            self.dts.transition(dt_id, Phase.TERMINATE)

    def _materialize(self, definition) -> list:
        if not getattr(definition, "asset_refs", ()):
            return []
        return self.dts.resolve_payloads(definition)

    def _resolve_snapshot(self, storage_key: str) -> bytes:
        path = self.dts.snapshot_file(storage_key)
        if not path.exists():
            raise NotFound(f"snapshot {storage_key} not found")
        return path.read_bytes()

    def _job_env(self, definition) -> dict:
        return {
            "TWIN_BROKER": self.broker_address,
            "TWIN_INSTANCE": self.instance_id,
        }

    def pt_publish(self, dt_id: str, payload: bytes) -> None:
        channel_set = self._channels(dt_id)
        if channel_set is None:
            return
        for channel in channel_set.pt_publishers():
            channel.publish(payload)

    def _channels(self, dt_id: str):
        with self._channel_lock:
            cached = self._channel_sets.get(dt_id)
            if cached is not None:
                return cached
        try:
            entry = self.dts.entry(dt_id)
        except NotFound:
            return None
        channels_config = entry.definition.config.get("channels") or []
        if not channels_config:
            return None
        channel_set = bind_channels(
            dt_id, channels_config, self.broker_client, client_id=f"{self.instance_id}-{dt_id}"
        )
        with self._channel_lock:
            self._channel_sets[dt_id] = channel_set
        return channel_set

    # -- metrics ------------------------------------------------------------------------

    def post_metric(self, dt_id: str, name: str, value: float,
                    ts: Optional[float] = None, labels: Optional[dict] = None) -> dict:
        if not name:
            raise InvalidConfig("metric name must be non-empty")
        metric = Metric(dt_id, name, float(value), ts or time.time(), labels or {})
        self._metrics.setdefault(dt_id, []).append(metric)
        self._metric_log.append({"event": "metric", **metric.to_dict()})
        return metric.to_dict()

    def get_metrics(self, dt_id: str, name: Optional[str] = None, limit: int = 500) -> list[dict]:
        series = self._metrics.get(dt_id, [])
        if name:
            series = [m for m in series if m.name == name]
        return [m.to_dict() for m in series[-limit:]]

    # -- status ---------------------------------------------------------------------------

    def health(self) -> dict:
        return {
            "status": "ok",
            "instance_id": self.instance_id,
            "broker": self.broker_address,
            "dts": len(self.dts.list()),
            "backends": sorted(self.federation.links),
        }
