"""DT composition: pinned asset refs + configuration + lifecycle spec.

A DTDefinition is an immutable snapshot. Reconfiguration appends a new config
revision (history is reconstructable) and walks the lifecycle through the
reconfigure phase. Composition pins asset versions at composition time; later
versions of the same assets never change an existing definition.

Configuration document (JSON):

    {
      "executor":   {"target": "process"|"mock", "mode": "continuous"|"oneoff",
                     "time_limit_s": num, "restart": {"max_restarts": int|null,
                     "backoff_s": num}, "command": [argv], "mock": {...},
                     "seed_snapshot": "<storage key>"},
      "channels":   [{"role": "pt"|"dt-peer", "topic": str,
                      "direction": "in"|"out"|"bidirectional"}],
      "parameters": {...},
      "prepackaged": true | {...inline payload...}
    }
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import (
    Forbidden,
    IllegalTransition,
    InvalidConfig,
    MissingCommunication,
    NotFound,
    UnresolvedRef,
)
from .lifecycle import (
    INITIAL,
    LifecycleSpec,
    LifecycleState,
    Phase,
    allowed_transitions,
    apply_transition,
    run_script_payload,
)
from .messaging import CHANNEL_DIRECTIONS, CHANNEL_ROLES, validate_topic
from .registry import AssetKind, Registry, visible


@dataclass(frozen=True)
class AssetRef:
    asset_id: str
    pinned_version: int
    backend: Optional[str] = None  # None = local registry
    config_overrides: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "asset_id": self.asset_id,
            "pinned_version": self.pinned_version,
            "backend": self.backend,
            "config_overrides": self.config_overrides,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AssetRef":
        return cls(
            asset_id=data["asset_id"],
            pinned_version=int(data.get("pinned_version") or data.get("version") or 0),
            backend=data.get("backend"),
            config_overrides=data.get("config_overrides") or {},
        )


@dataclass(frozen=True)
class DTDefinition:
    dt_id: str
    name: str
    owner: str
    asset_refs: tuple
    config: dict
    lifecycle_spec: LifecycleSpec
    managing_instance: str
    created_at: float = 0.0

    def to_dict(self) -> dict:
        return {
            "dt_id": self.dt_id,
            "name": self.name,
            "owner": self.owner,
            "asset_refs": [r.to_dict() for r in self.asset_refs],
            "config": self.config,
            "lifecycle_spec": self.lifecycle_spec.to_dict(),
            "managing_instance": self.managing_instance,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DTDefinition":
        return cls(
            dt_id=data["dt_id"],
            name=data["name"],
            owner=data["owner"],
            asset_refs=tuple(AssetRef.from_dict(r) for r in data["asset_refs"]),
            config=data["config"],
            lifecycle_spec=LifecycleSpec.from_dict(data["lifecycle_spec"]),
            managing_instance=data["managing_instance"],
            created_at=float(data.get("created_at", 0.0)),
        )


@dataclass(frozen=True)
class Diagnostic:
    path: str
    message: str

    def to_dict(self) -> dict:
        return {"path": self.path, "message": self.message}


EXECUTOR_TARGETS = {"process", "mock"}
EXECUTOR_MODES = {"continuous", "oneoff"}


def validate_config(config) -> list[Diagnostic]:
    """Structural diagnostics for a DT configuration document.

    Empty result means: parses, declares an execution target, and every
    channel binding names a valid topic. Interface-compatibility issues are
    warnings elsewhere; they never appear here.
    """
    diags: list[Diagnostic] = []
    if isinstance(config, (str, bytes)):
        try:
            config = json.loads(config)
        except ValueError as exc:
            return [Diagnostic("", f"config does not parse as JSON: {exc}")]
    if not isinstance(config, dict):
        return [Diagnostic("", "config must be a JSON object")]

    executor = config.get("executor")
    if not isinstance(executor, dict):
        diags.append(Diagnostic("executor", "missing executor section"))
    else:
        target = executor.get("target")
        if target not in EXECUTOR_TARGETS:
            diags.append(
                Diagnostic("executor.target", f"must be one of {sorted(EXECUTOR_TARGETS)}")
            )
        mode = executor.get("mode")
        if mode is not None and mode not in EXECUTOR_MODES:
            diags.append(
                Diagnostic("executor.mode", f"must be one of {sorted(EXECUTOR_MODES)}")
            )
        limit = executor.get("time_limit_s")
        if limit is not None and (not isinstance(limit, (int, float)) or limit <= 0):
            diags.append(Diagnostic("executor.time_limit_s", "must be a positive number"))
        command = executor.get("command")
        if command is not None and (
            not isinstance(command, list) or not all(isinstance(a, str) for a in command)
        ):
            diags.append(Diagnostic("executor.command", "must be an argv list of strings"))

    channels = config.get("channels", [])
    if not isinstance(channels, list):
        diags.append(Diagnostic("channels", "must be a list"))
        channels = []
    for i, ch in enumerate(channels):
        base = f"channels[{i}]"
        if not isinstance(ch, dict):
            diags.append(Diagnostic(base, "must be an object"))
            continue
        if ch.get("role") not in CHANNEL_ROLES:
            diags.append(Diagnostic(f"{base}.role", f"must be one of {sorted(CHANNEL_ROLES)}"))
        direction = ch.get("direction", "bidirectional")
        if direction not in CHANNEL_DIRECTIONS:
            diags.append(
                Diagnostic(f"{base}.direction", f"must be one of {sorted(CHANNEL_DIRECTIONS)}")
            )
        topic = ch.get("topic")
        if not topic or not isinstance(topic, str):
            diags.append(Diagnostic(f"{base}.topic", "channel binding must name a topic"))
        else:
            try:
                validate_topic(topic)
            except Exception as exc:
                diags.append(Diagnostic(f"{base}.topic", str(exc)))
    return diags


def interface_warnings(manifests: list[dict]) -> list[Diagnostic]:
    """Advisory-only composability check over declared manifest interfaces.

    Warns when an asset declares inputs that no other selected asset lists
    among its outputs. Never blocks composition.
    """
    outputs = set()
    for m in manifests:
        iface = m.get("interface") or {}
        outputs.update(map(str, iface.get("outputs", [])))
    warnings = []
    for m in manifests:
        iface = m.get("interface") or {}
        for inp in iface.get("inputs", []):
            if str(inp) not in outputs:
                warnings.append(
                    Diagnostic(
                        f"interface.{m.get('name', '?')}.inputs",
                        f"declared input {inp!r} is not produced by any selected asset",
                    )
                )
    return warnings


def new_dt_id() -> str:
    return "dt-" + uuid.uuid4().hex[:12]


@dataclass
class DTEntry:
    definition: DTDefinition
    state: LifecycleState
    revisions: list  # [{"rev": n, "config": ..., "refs": [...]}]
    peers: list = field(default_factory=list)  # [{"instance_id", "topic"}]
    lock: threading.RLock = field(default_factory=threading.RLock)


class DTManager:
    """Owns composed DTs: definitions, config revisions, lifecycle states.

    ``remote_lookup(backend_id, asset_id)`` and ``remote_payload(ref)`` come
    from the federation layer when refs carry a backend id.
    """

    def __init__(
        self,
        registry: Registry,
        instance_id: str,
        data_dir: Optional[str | Path] = None,
        log=None,
        remote_lookup=None,
        remote_payload=None,
        script_timeout_s: float = 60.0,
    ):
        self.registry = registry
        self.instance_id = instance_id
        self.data_dir = Path(data_dir) if data_dir else None
        self.log = log
        self.remote_lookup = remote_lookup
        self.remote_payload = remote_payload
        self.script_timeout_s = script_timeout_s
        self._dts: dict[str, DTEntry] = {}
        self._lock = threading.RLock()
        if log is not None:
            self._replay()

    # -- persistence ---------------------------------------------------------

    def _replay(self) -> None:
        for rec in self.log.replay():
            event = rec["event"]
            if event == "composed":
                definition = DTDefinition.from_dict(rec["definition"])
                self._dts[definition.dt_id] = DTEntry(
                    definition=definition,
                    state=LifecycleState(),
                    revisions=[
                        {
                            "rev": 1,
                            "config": definition.config,
                            "refs": [r.to_dict() for r in definition.asset_refs],
                        }
                    ],
                )
            elif event == "revision":
                entry = self._dts[rec["dt_id"]]
                refs = tuple(AssetRef.from_dict(r) for r in rec["refs"])
                entry.revisions.append(
                    {"rev": rec["rev"], "config": rec["config"], "refs": rec["refs"]}
                )
                entry.definition = replace(
                    entry.definition, config=rec["config"], asset_refs=refs
                )
            elif event == "transition":
                entry = self._dts[rec["dt_id"]]
                phase = Phase.parse(rec["phase"])
                entry.state = LifecycleState(
                    current=phase,
                    history=entry.state.history + ((phase, rec["ts"]),),
                    state_snapshot=rec.get("snapshot") or entry.state.state_snapshot,
                )
            elif event == "peers":
                entry = self._dts[rec["dt_id"]]
                entry.peers = rec["peers"]

    def _append(self, record: dict) -> None:
        if self.log is not None:
            self.log.append(record)

    # -- ref resolution ------------------------------------------------------

    def _resolve_ref(self, ref: AssetRef, owner: str):
        """Return the (record, version) a ref pins, enforcing visibility."""
        if ref.backend is None:
            record = self.registry.lookup(ref.asset_id)
            if record is None:
                raise UnresolvedRef(f"asset {ref.asset_id} not found")
            if not visible(record, owner):
                raise Forbidden(f"asset {ref.asset_id} is private to another user")
        else:
            if self.remote_lookup is None:
                raise UnresolvedRef(f"no federation configured for backend {ref.backend}")
            record = self.remote_lookup(ref.backend, ref.asset_id)
            if record is None:
                raise UnresolvedRef(
                    f"asset {ref.asset_id} not in remote cache for backend {ref.backend}"
                )
        try:
            version = record.version_entry(ref.pinned_version)
        except NotFound:
            raise UnresolvedRef(
                f"asset {ref.asset_id} has no version {ref.pinned_version}"
            )
        return record, version

    def resolve_payloads(self, definition: DTDefinition) -> list[tuple[str, bytes]]:
        """Materialize (asset name, payload bytes) for every pinned ref."""
        out = []
        for ref in definition.asset_refs:
            record, version = self._resolve_ref(ref, definition.owner)
            if ref.backend is None:
                _, _, payload = self.registry.get_asset(
                    ref.asset_id, ref.pinned_version, definition.owner
                )
            else:
                payload = self.remote_payload(ref)
            out.append((record.name, payload))
        return out

    # -- operations ----------------------------------------------------------

    def compose_dt(
        self,
        owner: str,
        name: str,
        refs: list,
        config: dict,
        lifecycle: LifecycleSpec,
    ) -> DTDefinition:
        diags = validate_config(config)
        if diags:
            raise InvalidConfig("config failed validation", diagnostics=diags)

        prepackaged = config.get("prepackaged")
        if not refs and not isinstance(prepackaged, dict):
            raise InvalidConfig(
                "definition needs asset refs or a self-contained prepackaged payload"
            )

        resolved = []
        for ref in refs:
            record, version = self._resolve_ref(ref, owner)
            resolved.append((ref, record, version))

        if prepackaged is True:
            if len(resolved) != 1 or resolved[0][1].kind != AssetKind.DATA:
                raise InvalidConfig(
                    "prepackaged DTs pin exactly one data-kind asset ref"
                )

        # Every DT talks to its PT through at least one channel or service asset.
        has_channel = bool(config.get("channels"))
        has_service = any(rec.kind == AssetKind.SERVICE for _, rec, _ in resolved)
        if not has_channel and not has_service:
            raise MissingCommunication(
                "dt has no broker channel and no service-kind asset"
            )

        for phase, script_ref in lifecycle.phase_scripts.items():
            record = self.registry.lookup(script_ref)
            if record is None:
                raise UnresolvedRef(f"{phase.value} script asset {script_ref} not found")
            if not visible(record, owner):
                raise Forbidden(f"{phase.value} script asset {script_ref} is private")
            if record.kind not in (AssetKind.FUNCTION, AssetKind.SERVICE):
                raise InvalidConfig(
                    f"{phase.value} script asset must be function- or service-kind"
                )

        definition = DTDefinition(
            dt_id=new_dt_id(),
            name=name,
            owner=owner,
            asset_refs=tuple(refs),
            config=config,
            lifecycle_spec=lifecycle,
            managing_instance=self.instance_id,
            created_at=time.time(),
        )
        entry = DTEntry(
            definition=definition,
            state=LifecycleState(),
            revisions=[
                {"rev": 1, "config": config, "refs": [r.to_dict() for r in refs]}
            ],
        )
        with self._lock:
            self._dts[definition.dt_id] = entry
        self._write_revision_file(definition.dt_id, 1, config)
        self._append({"event": "composed", "definition": definition.to_dict()})
        return definition

    def reconfigure_dt(
        self,
        dt_id: str,
        new_config: dict,
        requester: str,
        new_refs: Optional[list] = None,
    ) -> DTDefinition:
        entry = self.entry(dt_id)
        with entry.lock:
            if entry.definition.owner != requester:
                raise Forbidden(f"{requester} does not own dt {dt_id}")
            diags = validate_config(new_config)
            if diags:
                raise InvalidConfig("config failed validation", diagnostics=diags)
            refs = tuple(new_refs) if new_refs is not None else entry.definition.asset_refs
            for ref in refs:
                self._resolve_ref(ref, entry.definition.owner)
            # Transition first: a failing reconfigure script must not record a revision.
            self._transition_locked(entry, Phase.RECONFIGURE)
            rev = entry.revisions[-1]["rev"] + 1
            entry.revisions.append(
                {"rev": rev, "config": new_config, "refs": [r.to_dict() for r in refs]}
            )
            entry.definition = replace(
                entry.definition, config=new_config, asset_refs=refs
            )
            self._write_revision_file(dt_id, rev, new_config)
            self._append(
                {
                    "event": "revision",
                    "dt_id": dt_id,
                    "rev": rev,
                    "config": new_config,
                    "refs": [r.to_dict() for r in refs],
                }
            )
            return entry.definition

    # -- lifecycle glue ------------------------------------------------------

    def entry(self, dt_id: str) -> DTEntry:
        with self._lock:
            entry = self._dts.get(dt_id)
        if entry is None:
            raise NotFound(f"dt {dt_id} not found")
        return entry

    def get(self, dt_id: str) -> DTDefinition:
        return self.entry(dt_id).definition

    def list(self) -> list[DTEntry]:
        with self._lock:
            return list(self._dts.values())

    def allowed(self, dt_id: str) -> set:
        entry = self.entry(dt_id)
        return allowed_transitions(entry.state.current, entry.definition.lifecycle_spec)

    def set_peers(self, dt_id: str, peers: list) -> None:
        entry = self.entry(dt_id)
        with entry.lock:
            entry.peers = list(peers)
            self._append({"event": "peers", "dt_id": dt_id, "peers": entry.peers})

    def transition(self, dt_id: str, target: Phase) -> LifecycleState:
        entry = self.entry(dt_id)
        with entry.lock:
            return self._transition_locked(entry, target)

    def _transition_locked(self, entry: DTEntry, target: Phase) -> LifecycleState:
        dt_id = entry.definition.dt_id
        snapshot_path = None
        env = {
            "DT_ID": dt_id,
            "DT_PHASE": target.value,
            "DT_CONFIG_PATH": str(self._revision_file(dt_id, entry.revisions[-1]["rev"]))
            if self.data_dir
            else "",
        }
        snapshot_writer = None
        if target == Phase.TERMINATE:
            snapshot_path = self._snapshot_path(entry)
            env["DT_SNAPSHOT_PATH"] = str(snapshot_path) if snapshot_path else ""
            snapshot_writer = lambda: self._write_snapshot(entry, snapshot_path)

        new_state = apply_transition(
            entry.state,
            target,
            entry.definition.lifecycle_spec,
            script_runner=self._run_script,
            snapshot_writer=snapshot_writer,
            env=env,
        )
        entry.state = new_state
        self._append(
            {
                "event": "transition",
                "dt_id": dt_id,
                "phase": target.value,
                "ts": new_state.history[-1][1],
                "snapshot": new_state.state_snapshot if target == Phase.TERMINATE else None,
            }
        )
        return new_state

    def _run_script(self, phase: Phase, script_ref: str, env: dict):
        record = self.registry.lookup(script_ref)
        if record is None:
            from .lifecycle import ScriptResult

            return ScriptResult(exit_code=127, output=f"script asset {script_ref} missing")
        payload = self.registry.blobs.get(record.latest.content_hash)
        return run_script_payload(payload, env, timeout_s=self.script_timeout_s)

    # -- files ---------------------------------------------------------------

    def _dt_dir(self, dt_id: str) -> Optional[Path]:
        if self.data_dir is None:
            return None
        d = self.data_dir / "dts" / dt_id
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _revision_file(self, dt_id: str, rev: int) -> Optional[Path]:
        d = self._dt_dir(dt_id)
        if d is None:
            return None
        cfg_dir = d / "config"
        cfg_dir.mkdir(exist_ok=True)
        return cfg_dir / f"rev-{rev}.json"

    def _write_revision_file(self, dt_id: str, rev: int, config: dict) -> None:
        path = self._revision_file(dt_id, rev)
        if path is not None:
            path.write_text(json.dumps(config, indent=2, sort_keys=True))

    def _snapshot_path(self, entry: DTEntry) -> Optional[Path]:
        d = self._dt_dir(entry.definition.dt_id)
        if d is None:
            return None
        n = sum(1 for p, _ in entry.state.history if p == Phase.TERMINATE) + 1
        return d / f"snapshot-{n}.json"

    def _write_snapshot(self, entry: DTEntry, path: Optional[Path]) -> str:
        """Persist the terminate snapshot; the phase script may have written it."""
        dt_id = entry.definition.dt_id
        if path is None:
            return f"dts/{dt_id}/snapshot-mem"
        if not path.exists():
            doc = {
                "dt_id": dt_id,
                "name": entry.definition.name,
                "terminated_at": time.time(),
                "config_revision": entry.revisions[-1]["rev"],
                "phases": [p.value for p, _ in entry.state.history] + [Phase.TERMINATE.value],
            }
            path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return str(path.relative_to(self.data_dir))

    def snapshot_file(self, storage_key: str) -> Path:
        if self.data_dir is None:
            raise NotFound("no data dir; snapshots unavailable")
        return self.data_dir / storage_key
