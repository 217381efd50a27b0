"""Server aggregation strategies: FedAvg, FedProx, Scaffold and FedAdam.

All strategies share :class:`StrategyState`; :func:`aggregate` dispatches on
``state.kind`` and :func:`hot_swap` replaces the kind between rounds.
Updates are always folded in ascending ``client_id`` order so results do not
depend on the order in which clients finished.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

FEDAVG = "fedavg"
FEDPROX = "fedprox"
SCAFFOLD = "scaffold"
FEDADAM = "fedadam"
STRATEGY_KINDS = (FEDAVG, FEDPROX, SCAFFOLD, FEDADAM)


@dataclass(frozen=True)
class StrategyParams:
    mu: float = 0.0
    eta: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    global_lr: float = 1.0


@dataclass
class ClientUpdate:
    client_id: int
    params: np.ndarray
    num_samples: int
    control_delta: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


@dataclass
class LocalTrainingDirective:
    epochs: int
    lr: float
    batch_size: int
    prox_mu: float = 0.0
    correction: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")


@dataclass
class StrategyState:
    kind: str
    params: StrategyParams
    param_length: int
    server_c: np.ndarray | None = None
    client_c: dict[int, np.ndarray] | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    round_index: int = 0
    in_round: bool = field(default=False, compare=False)


def new_state(kind: str, params: StrategyParams, param_length: int, round_index: int = 0) -> StrategyState:
    if kind not in STRATEGY_KINDS:
        raise ValueError(f"unknown strategy {kind!r}")
    state = StrategyState(kind, params, param_length, round_index=round_index)
    if kind == SCAFFOLD:
        state.server_c = np.zeros(param_length)
        state.client_c = {}
    elif kind == FEDADAM:
        state.m = np.zeros(param_length)
        state.v = np.zeros(param_length)
    return state


def _ordered(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValueError("no clients reported")
    ordered = sorted(updates, key=lambda u: u.client_id)
    length = len(ordered[0].params)
    if any(len(u.params) != length for u in ordered):
        raise ValueError("client updates have inconsistent lengths")
    return ordered


def aggregate_fedavg(global_params: np.ndarray, updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Sample-weighted mean of client parameters."""
    ordered = _ordered(updates)
    if len(ordered[0].params) != len(global_params):
        raise ValueError("client updates do not match the global model length")
    total = sum(u.num_samples for u in ordered)
    out = np.zeros(len(global_params))
    for u in ordered:
        out += (u.num_samples / total) * u.params
    return out


def fedprox_objective(base_loss: float, params: np.ndarray, global_params: np.ndarray, mu: float) -> float:
    if mu < 0:
        raise ValueError("mu must be >= 0")
    diff = np.asarray(params) - np.asarray(global_params)
    return base_loss + (mu / 2.0) * float(diff @ diff)


def fedprox_gradient(grad: np.ndarray, params: np.ndarray, global_params: np.ndarray, mu: float) -> np.ndarray:
    return grad + mu * (params - global_params)


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float,
             correction: np.ndarray | None = None) -> np.ndarray:
    if correction is not None:
        grad = grad + correction
    return params - lr * grad


def scaffold_local_step(params: np.ndarray, grad: np.ndarray, lr: float,
                        server_c: np.ndarray, client_c: np.ndarray) -> np.ndarray:
    """One drift-corrected step: params - lr * (grad - c_i + c)."""
    return sgd_step(params, grad, lr, server_c - client_c)


def scaffold_client_finalize(y_i: np.ndarray, x: np.ndarray, c: np.ndarray, c_i: np.ndarray,
                             lr: float, local_steps: int, client_id: int = 0,
                             num_samples: int = 1) -> tuple[ClientUpdate, np.ndarray]:
    """Control-variate refresh (option II); returns the update and the new c_i."""
    if local_steps < 1 or lr <= 0:
        raise ValueError("scaffold finalize needs local_steps >= 1 and lr > 0")
    c_i_new = c_i - c + (x - y_i) / (local_steps * lr)
    return ClientUpdate(client_id, y_i, num_samples, c_i_new - c_i), c_i_new


def scaffold_server_update(x: np.ndarray, updates: Sequence[ClientUpdate], server_c: np.ndarray,
                           total_clients: int, global_lr: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    ordered = _ordered(updates)
    s = len(ordered)
    mean_y = np.zeros(len(x))
    delta_sum = np.zeros(len(x))
    for u in ordered:
        mean_y += u.params
        if u.control_delta is not None:
            delta_sum += u.control_delta
    mean_y /= s
    # with unit server rate x + (mean_y - x) is mean_y; use it directly to stay exact
    x_new = mean_y if global_lr == 1.0 else x + global_lr * (mean_y - x)
    return x_new, server_c + delta_sum / total_clients


def fedadam_server_step(x: np.ndarray, updates: Sequence[ClientUpdate], m: np.ndarray, v: np.ndarray,
                        beta1: float, beta2: float, eta: float,
                        tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1 and eta > 0 and tau > 0):
        raise ValueError("fedadam needs beta1, beta2 in [0, 1), eta > 0, tau > 0")
    delta = aggregate_fedavg(x, updates) - x
    m_new = beta1 * m + (1.0 - beta1) * delta
    v_new = beta2 * v + (1.0 - beta2) * delta * delta
    return x + eta * m_new / (np.sqrt(v_new) + tau), m_new, v_new


def make_directive(state: StrategyState, client_id: int, *, epochs: int, lr: float,
                   batch_size: int) -> LocalTrainingDirective:
    mu = 0.0
    correction = None
    if state.kind == FEDPROX:
        mu = state.params.mu
    elif state.kind == SCAFFOLD:
        if state.server_c is None or state.client_c is None:
            raise ValueError("scaffold state is missing control variates")
        c_i = state.client_c.get(client_id)
        correction = state.server_c.copy() if c_i is None else state.server_c - c_i
    return LocalTrainingDirective(epochs, lr, batch_size, mu, correction)


def aggregate(state: StrategyState, x: np.ndarray, updates: Sequence[ClientUpdate],
              total_clients: int) -> np.ndarray:
    """Fold one round of updates into a new global model; updates ``state``."""
    hp = state.params
    if state.kind in (FEDAVG, FEDPROX):
        x_new = aggregate_fedavg(x, updates)
    elif state.kind == SCAFFOLD:
        x_new, state.server_c = scaffold_server_update(x, updates, state.server_c, total_clients, hp.global_lr)
        for u in _ordered(updates):
            if u.control_delta is None:
                raise ValueError(f"client {u.client_id} sent no control delta under scaffold")
            c_i = state.client_c.get(u.client_id)
            state.client_c[u.client_id] = u.control_delta.copy() if c_i is None else c_i + u.control_delta
    elif state.kind == FEDADAM:
        x_new, state.m, state.v = fedadam_server_step(x, updates, state.m, state.v,
                                                      hp.beta1, hp.beta2, hp.eta, hp.tau)
    else:
        raise ValueError(f"unknown strategy {state.kind!r}")
    state.round_index += 1
    return x_new


def hot_swap(state: StrategyState, new_kind: str, params: StrategyParams | None = None) -> StrategyState:
    """Switch strategy at a round boundary with freshly zeroed strategy state."""
    if state.in_round:
        raise RuntimeError("swap only at round boundary")
    swapped = new_state(new_kind, params or state.params, state.param_length, state.round_index)
    logger.info("strategy swap %s -> %s after round %d", state.kind, new_kind, state.round_index)
    return swapped


def state_to_json(state: StrategyState) -> dict:
    def arr(a):
        return None if a is None else a.tolist()

    return {
        "kind": state.kind,
        "params": vars(state.params).copy(),
        "param_length": state.param_length,
        "server_c": arr(state.server_c),
        "client_c": None if state.client_c is None else {str(k): v.tolist() for k, v in state.client_c.items()},
        "m": arr(state.m),
        "v": arr(state.v),
        "round_index": state.round_index,
    }


def state_from_json(obj: dict) -> StrategyState:
    def arr(a):
        return None if a is None else np.array(a, dtype=np.float64)

    client_c = obj.get("client_c")
    return StrategyState(
        obj["kind"], StrategyParams(**obj["params"]), obj["param_length"],
        arr(obj.get("server_c")),
        None if client_c is None else {int(k): np.array(v, dtype=np.float64) for k, v in client_c.items()},
        arr(obj.get("m")), arr(obj.get("v")), obj["round_index"],
    )
