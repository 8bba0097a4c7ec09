"""Lifecycle machine: exhaustive relation checks, atomicity, script plumbing."""

import itertools

import pytest

from twinforge.errors import (
    IllegalTransition,
    InvalidConfig,
    ScriptFailed,
    SnapshotFailed,
)
from twinforge.lifecycle import (
    INITIAL,
    LifecycleSpec,
    LifecycleState,
    Phase,
    ScriptResult,
    allowed_transitions,
    apply_transition,
    run_script_payload,
)

C, E, R, T = Phase.CREATE, Phase.EXECUTE, Phase.RECONFIGURE, Phase.TERMINATE

# Written out by hand, independent of the implementation's relation table.
ORACLE = {
    INITIAL: {C},
    C: {E},
    E: {R, T},
    R: {E, T},
    T: set(),
}
VALID_SUBSETS = [{C, E}, {C, E, R}, {C, E, T}, {C, E, R, T}]
ALL_CURRENTS = [INITIAL, C, E, R, T]


def test_relation_matches_oracle_under_every_enabled_subset():
    for subset, current in itertools.product(VALID_SUBSETS, ALL_CURRENTS):
        spec = LifecycleSpec(enabled_phases=frozenset(subset))
        expected = ORACLE[current] & subset
        assert allowed_transitions(current, spec) == expected, (current, subset)


def test_apply_succeeds_exactly_on_oracle_edges():
    for subset, current, target in itertools.product(
        VALID_SUBSETS, ALL_CURRENTS, list(Phase)
    ):
        spec = LifecycleSpec(enabled_phases=frozenset(subset))
        state = LifecycleState(current=current)
        if target in ORACLE[current] & subset:
            new = apply_transition(state, target, spec, now=1.0)
            assert new.current == target
            assert new.history == ((target, 1.0),)
        else:
            with pytest.raises(IllegalTransition):
                apply_transition(state, target, spec)
            # failure atomicity: caller-held state untouched
            assert state == LifecycleState(current=current)


def test_terminate_is_terminal():
    spec = LifecycleSpec()
    state = LifecycleState(current=T)
    assert allowed_transitions(T, spec) == set()
    for target in Phase:
        with pytest.raises(IllegalTransition):
            apply_transition(state, target, spec)


def test_history_is_append_only_and_ordered():
    spec = LifecycleSpec()
    state = LifecycleState()
    walk = [C, E, R, E, T]
    for i, target in enumerate(walk):
        prev = state
        state = apply_transition(state, target, spec, now=float(i))
        assert state.history[: len(prev.history)] == prev.history
        assert len(state.history) == len(prev.history) + 1
    assert [p for p, _ in state.history] == walk
    assert [ts for _, ts in state.history] == [0.0, 1.0, 2.0, 3.0, 4.0]


def test_spec_requires_create_and_execute():
    for subset in [set(), {C}, {E}, {C, R}, {E, R, T}]:
        with pytest.raises(InvalidConfig):
            LifecycleSpec(enabled_phases=frozenset(subset))


def test_spec_rejects_script_on_disabled_phase():
    with pytest.raises(InvalidConfig):
        LifecycleSpec(enabled_phases=frozenset({C, E}), phase_scripts={R: "ast-x"})


def test_spec_dict_round_trip():
    spec = LifecycleSpec(enabled_phases=frozenset({C, E, T}), phase_scripts={E: "ast-1"})
    assert LifecycleSpec.from_dict(spec.to_dict()) == spec
    assert LifecycleSpec.from_dict({}) == LifecycleSpec()
    with pytest.raises(InvalidConfig):
        LifecycleSpec.from_dict({"enabled_phases": ["create", "execute", "bogus"]})


def test_state_dict_round_trip():
    state = LifecycleState(current=E, history=((C, 1.0), (E, 2.0)), state_snapshot="k")
    assert LifecycleState.from_dict(state.to_dict()) == state
    fresh = LifecycleState()
    assert LifecycleState.from_dict(fresh.to_dict()) == fresh


# -- scripts ----------------------------------------------------------------


def test_failing_script_blocks_the_transition():
    spec = LifecycleSpec(phase_scripts={E: "ast-script"})
    state = LifecycleState(current=C)

    def runner(phase, ref, env):
        assert (phase, ref) == (E, "ast-script")
        return ScriptResult(exit_code=3, output="boom")

    with pytest.raises(ScriptFailed) as exc:
        apply_transition(state, E, spec, script_runner=runner)
    assert exc.value.detail["exit_code"] == 3
    assert exc.value.detail["output"] == "boom"
    assert state.current == C and state.history == ()


def test_script_env_is_forwarded():
    spec = LifecycleSpec(phase_scripts={C: "ast-script"})
    seen = {}

    def runner(phase, ref, env):
        seen.update(env)
        return ScriptResult(exit_code=0, output="")

    apply_transition(LifecycleState(), C, spec, script_runner=runner,
                     env={"DT_ID": "dt-1"})
    assert seen == {"DT_ID": "dt-1"}


def test_snapshot_written_only_on_terminate():
    spec = LifecycleSpec()
    calls = []

    def writer():
        calls.append(1)
        return "snapshots/dt-1/snap-1.json"

    state = LifecycleState()
    for target in (C, E):
        state = apply_transition(state, target, spec, snapshot_writer=writer)
    assert calls == [] and state.state_snapshot is None
    state = apply_transition(state, T, spec, snapshot_writer=writer)
    assert calls == [1]
    assert state.state_snapshot == "snapshots/dt-1/snap-1.json"


def test_snapshot_failure_blocks_terminate():
    def writer():
        raise OSError("disk full")

    state = LifecycleState(current=E)
    with pytest.raises(SnapshotFailed):
        apply_transition(state, T, LifecycleSpec(), snapshot_writer=writer)
    assert state.current == E


# -- script payload execution --------------------------------------------------


def test_python_payload_runs_with_env():
    result = run_script_payload(
        b"import os, sys; sys.exit(0 if os.environ.get('DT_PHASE') == 'create' else 1)",
        {"DT_PHASE": "create"},
    )
    assert result.exit_code == 0


def test_payload_output_is_captured():
    result = run_script_payload(
        b"import sys; print('to out'); print('to err', file=sys.stderr); sys.exit(7)",
        {},
    )
    assert result.exit_code == 7
    assert "to out" in result.output and "to err" in result.output


def test_shebang_payload_executes_directly(tmp_path):
    result = run_script_payload(b"#!/bin/sh\necho shell-ran\nexit 0\n", {},
                                workdir=str(tmp_path))
    assert result.exit_code == 0
    assert "shell-ran" in result.output


def test_timed_out_payload_counts_as_failure():
    result = run_script_payload(b"import time; time.sleep(5)", {}, timeout_s=0.3)
    assert result.exit_code == -1
    assert "[timed out]" in result.output
