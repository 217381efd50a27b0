"""Adaptation executor: a small state machine over per-round validation F1.

Rules, checked in order on every observation:

1. F1 fell more than ``f1_drop_delta`` below the best so far and a switch is
   still available -> switch to the next strategy in the chain.
2. F1 beat the best by more than ``min_improve`` -> record it, continue.
3. Otherwise count a stagnant round; after ``patience`` of them switch if
   possible, else stop early if enabled, else keep going.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

WARMUP = "WARMUP"
STEADY = "STEADY"
STAGNANT = "STAGNANT"
SWITCHED = "SWITCHED"
STOPPED = "STOPPED"

CONTINUE = "continue"
SWITCH = "switch"
EARLY_STOP = "early_stop"

TRIGGER_NONE = "NONE"
TRIGGER_STAGNATION = "STAGNATION"
TRIGGER_F1_DROP = "F1_DROP"


class ExecutorStoppedError(RuntimeError):
    pass


@dataclass(frozen=True)
class AdaptationPolicy:
    patience: int = 5
    f1_drop_delta: float = 0.05
    min_improve: float = 1e-4
    switch_chain: tuple[str, ...] = ("fedavg",)
    enable_early_stop: bool = False
    enable_switch: bool = False

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.f1_drop_delta < 1:
            raise ValueError("f1_drop_delta must be in (0, 1)")
        if self.min_improve < 0:
            raise ValueError("min_improve must be >= 0")
        if self.enable_switch and not self.switch_chain:
            raise ValueError("switch_chain must be nonempty when switching is enabled")


@dataclass(frozen=True)
class Decision:
    kind: str
    target: str | None = None
    reason: str | None = None

    def __str__(self) -> str:
        if self.kind == SWITCH:
            return f"switch:{self.target}"
        if self.kind == EARLY_STOP:
            return f"early_stop:{self.reason}"
        return CONTINUE


@dataclass(frozen=True)
class ExecutorState:
    phase: str = WARMUP
    best_f1: float = float("-inf")
    best_round: int = 0
    rounds_since_improve: int = 0
    switches_used: int = 0
    last_round: int = 0


@dataclass(frozen=True)
class AdaptationEvent:
    round: int
    from_phase: str
    to_phase: str
    decision: Decision
    trigger: str
    metric_snapshot: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        snap = self.metric_snapshot
        return {"round": self.round, "phase": self.to_phase, "from_phase": self.from_phase,
                "decision": str(self.decision), "trigger": self.trigger,
                "f1": snap.get("f1"), "best_f1": snap.get("best_f1")}


def _switch_available(state: ExecutorState, policy: AdaptationPolicy) -> bool:
    return policy.enable_switch and state.switches_used < len(policy.switch_chain) - 1


def reset_after_switch(state: ExecutorState) -> ExecutorState:
    return replace(state, rounds_since_improve=0, switches_used=state.switches_used + 1, phase=SWITCHED)


def observe(state: ExecutorState, policy: AdaptationPolicy, metrics) -> tuple[ExecutorState, Decision, AdaptationEvent]:
    """Consume one round of metrics (anything with ``round`` and ``f1``)."""
    if state.phase == STOPPED:
        raise ExecutorStoppedError("executor already stopped")
    rnd, f1 = int(metrics.round), float(metrics.f1)
    if rnd != state.last_round + 1:
        raise ValueError(f"expected round {state.last_round + 1}, got {rnd}")
    before = state.phase
    state = replace(state, last_round=rnd)
    trigger = TRIGGER_NONE

    if f1 < state.best_f1 - policy.f1_drop_delta and _switch_available(state, policy):
        decision = Decision(SWITCH, target=policy.switch_chain[state.switches_used + 1])
        trigger = TRIGGER_F1_DROP
        state = reset_after_switch(state)
    elif f1 > state.best_f1 + policy.min_improve:
        state = replace(state, best_f1=f1, best_round=rnd, rounds_since_improve=0, phase=STEADY)
        decision = Decision(CONTINUE)
    else:
        state = replace(state, rounds_since_improve=state.rounds_since_improve + 1, phase=STAGNANT)
        decision = Decision(CONTINUE)
        if state.rounds_since_improve >= policy.patience:
            if _switch_available(state, policy):
                decision = Decision(SWITCH, target=policy.switch_chain[state.switches_used + 1])
                trigger = TRIGGER_STAGNATION
                state = reset_after_switch(state)
            elif policy.enable_early_stop:
                decision = Decision(EARLY_STOP, reason="stagnation")
                trigger = TRIGGER_STAGNATION
                state = replace(state, phase=STOPPED)

    event = AdaptationEvent(rnd, before, state.phase, decision, trigger,
                            {"f1": f1, "best_f1": state.best_f1})
    return state, decision, event


def replay(f1_trace: Iterable[float], policy: AdaptationPolicy,
           max_rounds: int | None = None) -> list[AdaptationEvent]:
    """Feed a per-round F1 trace through the executor until it stops.

    Rounds are numbered from 1. Used to audit a run from its metrics log and to
    compare policies on scripted traces.
    """

    @dataclass
    class _M:
        round: int
        f1: float

    state = ExecutorState()
    events = []
    for rnd, f1 in enumerate(f1_trace, start=1):
        if max_rounds is not None and rnd > max_rounds:
            break
        state, decision, event = observe(state, policy, _M(rnd, f1))
        events.append(event)
        if decision.kind == EARLY_STOP:
            break
    return events


def state_to_json(state: ExecutorState) -> dict:
    out = asdict(state)
    if out["best_f1"] == float("-inf"):
        out["best_f1"] = None
    return out


def state_from_json(obj: dict) -> ExecutorState:
    obj = dict(obj)
    if obj.get("best_f1") is None:
        obj["best_f1"] = float("-inf")
    return ExecutorState(**obj)
