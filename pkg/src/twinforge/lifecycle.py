"""Per-DT lifecycle state machine with user-attachable phase scripts.

Base transition relation:

    initial     -> {create}
    create      -> {execute}
    execute     -> {reconfigure, terminate}
    reconfigure -> {execute, terminate}
    terminate   -> {}            (terminal per instance)

A LifecycleSpec restricts the relation to its enabled phases (create and
execute are mandatory). Transitions run the attached phase script, if any, as
a subprocess; a failing or timed-out script leaves the state untouched.
Entering terminate persists a state snapshot.
"""

from __future__ import annotations

import os
import stat
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Union

from .errors import IllegalTransition, InvalidConfig, ScriptFailed, SnapshotFailed


class Phase(str, Enum):
    CREATE = "create"
    EXECUTE = "execute"
    RECONFIGURE = "reconfigure"
    TERMINATE = "terminate"

    @classmethod
    def parse(cls, value: str) -> "Phase":
        try:
            return cls(value)
        except ValueError:
            raise InvalidConfig(f"unknown lifecycle phase {value!r}")


INITIAL = "initial"  # pre-create sentinel; not a Phase

Current = Union[Phase, str]

BASE_RELATION: dict[Current, frozenset] = {
    INITIAL: frozenset({Phase.CREATE}),
    Phase.CREATE: frozenset({Phase.EXECUTE}),
    Phase.EXECUTE: frozenset({Phase.RECONFIGURE, Phase.TERMINATE}),
    Phase.RECONFIGURE: frozenset({Phase.EXECUTE, Phase.TERMINATE}),
    Phase.TERMINATE: frozenset(),
}

DEFAULT_SCRIPT_TIMEOUT_S = 60.0


@dataclass(frozen=True)
class LifecycleSpec:
    enabled_phases: frozenset = frozenset(Phase)
    phase_scripts: dict = field(default_factory=dict)  # Phase -> asset id

    def __post_init__(self):
        object.__setattr__(self, "enabled_phases", frozenset(self.enabled_phases))
        missing = {Phase.CREATE, Phase.EXECUTE} - self.enabled_phases
        if missing:
            raise InvalidConfig(
                f"lifecycle spec must enable {' and '.join(sorted(p.value for p in missing))}"
            )
        for phase in self.phase_scripts:
            if phase not in self.enabled_phases:
                raise InvalidConfig(f"script attached to disabled phase {phase.value}")

    def to_dict(self) -> dict:
        return {
            "enabled_phases": sorted(p.value for p in self.enabled_phases),
            "phase_scripts": {p.value: ref for p, ref in self.phase_scripts.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LifecycleSpec":
        if not isinstance(data, dict):
            raise InvalidConfig("lifecycle spec must be an object")
        phases = frozenset(Phase.parse(p) for p in data.get("enabled_phases", [p.value for p in Phase]))
        scripts = {
            Phase.parse(p): ref for p, ref in (data.get("phase_scripts") or {}).items()
        }
        return cls(enabled_phases=phases, phase_scripts=scripts)


@dataclass(frozen=True)
class LifecycleState:
    current: Current = INITIAL
    history: tuple = ()  # ((Phase, timestamp), ...)
    state_snapshot: Optional[str] = None  # storage key, set on terminate

    def to_dict(self) -> dict:
        return {
            "current": self.current.value if isinstance(self.current, Phase) else self.current,
            "history": [[p.value, ts] for p, ts in self.history],
            "state_snapshot": self.state_snapshot,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LifecycleState":
        current = data["current"]
        return cls(
            current=INITIAL if current == INITIAL else Phase.parse(current),
            history=tuple((Phase.parse(p), float(ts)) for p, ts in data["history"]),
            state_snapshot=data.get("state_snapshot"),
        )


def allowed_transitions(current: Current, spec: LifecycleSpec) -> set:
    """Transition relation restricted to the spec's enabled phases."""
    return {p for p in BASE_RELATION[current] if p in spec.enabled_phases}


@dataclass
class ScriptResult:
    exit_code: int
    output: str


# Runner signature: (phase, script_ref, extra_env) -> ScriptResult
ScriptRunner = Callable[[Phase, str, dict], ScriptResult]


def apply_transition(
    state: LifecycleState,
    target: Phase,
    spec: LifecycleSpec,
    script_runner: Optional[ScriptRunner] = None,
    snapshot_writer: Optional[Callable[[], str]] = None,
    env: Optional[dict] = None,
    now: Optional[float] = None,
) -> LifecycleState:
    """Apply one lifecycle transition, returning the new state.

    The input state is never mutated; on any failure the caller's state object
    remains the authoritative one (failure atomicity).
    """
    if target not in allowed_transitions(state.current, spec):
        cur = state.current.value if isinstance(state.current, Phase) else state.current
        raise IllegalTransition(f"cannot transition {cur} -> {target.value}")

    script_ref = spec.phase_scripts.get(target)
    if script_ref is not None and script_runner is not None:
        result = script_runner(target, script_ref, dict(env or {}))
        if result.exit_code != 0:
            raise ScriptFailed(
                f"{target.value} script exited {result.exit_code}",
                output=result.output,
                exit_code=result.exit_code,
            )

    snapshot_key = state.state_snapshot
    if target == Phase.TERMINATE:
        if snapshot_writer is not None:
            try:
                snapshot_key = snapshot_writer()
            except Exception as exc:
                raise SnapshotFailed(f"snapshot write failed: {exc}")

    ts = time.time() if now is None else now
    return LifecycleState(
        current=target,
        history=state.history + ((target, ts),),
        state_snapshot=snapshot_key,
    )


def run_script_payload(
    payload: bytes,
    extra_env: dict,
    timeout_s: float = DEFAULT_SCRIPT_TIMEOUT_S,
    workdir: Optional[str] = None,
) -> ScriptResult:
    """Run a phase-script payload as a subprocess; exit code 0 means success.

    Payloads starting with a shebang execute directly; anything else runs
    under the current Python interpreter. A timeout counts as failure.
    """
    suffix = ".sh" if payload.startswith(b"#!") else ".py"
    fd, path = tempfile.mkstemp(prefix="twin-script-", suffix=suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        env = dict(os.environ)
        env.update({k: str(v) for k, v in extra_env.items()})
        if payload.startswith(b"#!"):
            os.chmod(path, os.stat(path).st_mode | stat.S_IXUSR)
            argv = [path]
        else:
            argv = [sys.executable, path]
        try:
            proc = subprocess.run(
                argv,
                env=env,
                cwd=workdir,
                capture_output=True,
                timeout=timeout_s,
            )
        except subprocess.TimeoutExpired as exc:
            out = (exc.stdout or b"") + (exc.stderr or b"")
            return ScriptResult(exit_code=-1, output=out.decode("utf-8", "replace") + "\n[timed out]")
        output = (proc.stdout + proc.stderr).decode("utf-8", "replace")
        return ScriptResult(exit_code=proc.returncode, output=output)
    finally:
        try:
            os.unlink(path)
        except OSError:
            pass
