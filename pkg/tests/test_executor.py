from __future__ import annotations

from dataclasses import dataclass

import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs

from fedlad import executor as ex
from fedlad.executor import AdaptationPolicy, ExecutorState


@dataclass
class M:
    round: int
    f1: float


def _run(trace, policy, state=None):
    state = state or ExecutorState()
    out = []
    for rnd, f1 in enumerate(trace, start=state.last_round + 1):
        state, decision, event = ex.observe(state, policy, M(rnd, f1))
        out.append((state, decision, event))
        if decision.kind == ex.EARLY_STOP:
            break
    return out


def test_increasing_f1_always_continues():
    steps = _run([0.1 * i for i in range(1, 10)], AdaptationPolicy(patience=2, enable_early_stop=True))
    assert all(d.kind == ex.CONTINUE for _, d, _ in steps)
    assert all(s.rounds_since_improve == 0 for s, _, _ in steps)
    assert steps[-1][0].phase == ex.STEADY


def test_constant_f1_stops_at_patience():
    steps = _run([0.9] * 4, AdaptationPolicy(patience=3, enable_early_stop=True))
    assert [str(d) for _, d, _ in steps] == ["continue"] * 3 + ["early_stop:stagnation"]
    assert steps[-1][2].trigger == ex.TRIGGER_STAGNATION
    assert steps[-1][0].phase == ex.STOPPED


def test_f1_drop_switches():
    policy = AdaptationPolicy(patience=5, f1_drop_delta=0.05, switch_chain=("fedavg", "scaffold"),
                              enable_switch=True)
    steps = _run([0.99, 0.93], policy)
    state, decision, event = steps[-1]
    assert (decision.kind, decision.target) == (ex.SWITCH, "scaffold")
    assert event.trigger == ex.TRIGGER_F1_DROP
    assert state.phase == ex.SWITCHED
    assert state.best_f1 == 0.99
    assert event.to_json() == {"round": 2, "phase": "SWITCHED", "from_phase": "STEADY",
                               "decision": "switch:scaffold", "trigger": "F1_DROP",
                               "f1": 0.93, "best_f1": 0.99}


def test_drop_within_delta_is_stagnation_not_switch():
    policy = AdaptationPolicy(patience=5, f1_drop_delta=0.05, switch_chain=("fedavg", "scaffold"),
                              enable_switch=True)
    _, decision, event = _run([0.99, 0.95], policy)[-1]
    assert decision.kind == ex.CONTINUE and event.trigger == ex.TRIGGER_NONE


def test_switch_resets_counter_and_keeps_best():
    policy = AdaptationPolicy(patience=3, switch_chain=("fedavg", "fedprox"), enable_switch=True)
    steps = _run([0.8, 0.8, 0.8, 0.8, 0.8], policy)
    assert str(steps[3][1]) == "switch:fedprox"
    assert steps[3][2].trigger == ex.TRIGGER_STAGNATION
    assert steps[3][0].rounds_since_improve == 0
    assert steps[4][0].rounds_since_improve == 1
    assert steps[4][0].best_f1 == 0.8


def test_exhausted_chain_falls_back_to_early_stop():
    policy = AdaptationPolicy(patience=2, switch_chain=("fedavg", "scaffold"),
                              enable_switch=True, enable_early_stop=True)
    decisions = [str(d) for _, d, _ in _run([0.5] * 5, policy)]
    assert decisions == ["continue", "continue", "switch:scaffold", "continue", "early_stop:stagnation"]


def test_stagnation_without_actions_continues():
    steps = _run([0.5] * 10, AdaptationPolicy(patience=2))
    assert all(d.kind == ex.CONTINUE for _, d, _ in steps)
    assert steps[-1][0].phase == ex.STAGNANT


def test_min_improve_deadband():
    policy = AdaptationPolicy(patience=10, min_improve=1e-4)
    steps = _run([0.5, 0.50005, 0.6], policy)
    assert [s.rounds_since_improve for s, _, _ in steps] == [0, 1, 0]


def test_observe_after_stop_raises():
    policy = AdaptationPolicy(patience=1, enable_early_stop=True)
    state = _run([0.5, 0.5], policy)[-1][0]
    with pytest.raises(ex.ExecutorStoppedError):
        ex.observe(state, policy, M(3, 0.9))


def test_out_of_order_round_rejected():
    with pytest.raises(ValueError):
        ex.observe(ExecutorState(), AdaptationPolicy(), M(2, 0.5))


def test_policy_validation():
    with pytest.raises(ValueError):
        AdaptationPolicy(patience=0)
    with pytest.raises(ValueError):
        AdaptationPolicy(f1_drop_delta=1.5)
    with pytest.raises(ValueError):
        AdaptationPolicy(switch_chain=(), enable_switch=True)


def test_replay_matches_online_observation():
    policy = AdaptationPolicy(patience=2, f1_drop_delta=0.05, switch_chain=("fedavg", "scaffold", "fedadam"),
                              enable_switch=True, enable_early_stop=True)
    trace = [0.3, 0.6, 0.5, 0.7, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6]
    online = [e for _, _, e in _run(trace, policy)]
    assert online[-1].decision.kind == ex.EARLY_STOP
    assert ex.replay(trace, policy) == online
    assert ex.replay(trace, policy, max_rounds=3) == online[:3]


def test_state_json_round_trip():
    state = ExecutorState()
    assert ex.state_from_json(ex.state_to_json(state)) == state
    state = _run([0.3, 0.2], AdaptationPolicy())[-1][0]
    assert ex.state_from_json(ex.state_to_json(state)) == state


_f1s = hs.lists(hs.floats(0, 1), min_size=1, max_size=40)


@settings(max_examples=200, deadline=None)
@given(_f1s, hs.integers(1, 5), hs.booleans(), hs.booleans())
def test_fsm_invariants(trace, patience, switch, stop):
    policy = AdaptationPolicy(patience=patience, f1_drop_delta=0.05, switch_chain=("fedavg", "scaffold"),
                              enable_switch=switch, enable_early_stop=stop)
    events = ex.replay(trace, policy)
    best = float("-inf")
    counter = 0
    for ev, f1 in zip(events, trace):
        dropped = f1 < best - 0.05
        if ev.trigger == ex.TRIGGER_F1_DROP:
            assert dropped and switch
        if ev.decision.kind == ex.EARLY_STOP:
            assert stop
        if ev.decision.kind == ex.SWITCH:
            assert switch
        if ev.trigger == ex.TRIGGER_F1_DROP or ev.decision.kind == ex.SWITCH:
            counter = 0
        elif f1 > best + policy.min_improve:
            counter = 0
        else:
            counter += 1
        if ev.decision.kind == ex.EARLY_STOP:
            assert counter == patience
        # best moves only on improvements that clear the deadband
        if ev.trigger != ex.TRIGGER_F1_DROP and f1 > best + policy.min_improve:
            best = f1
        assert ev.metric_snapshot["best_f1"] == best
    # replay is a pure function of the trace
    assert ex.replay(trace, policy) == events
