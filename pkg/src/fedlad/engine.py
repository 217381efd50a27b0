"""Synchronous federated round loop.

A round: sample participants, train each locally from the current global
model, fold their updates with the active strategy, evaluate on the
server-held validation split, log, ask the executor what to do next, and
broadcast the new global model to the participants.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import executor as ex
from . import strategies as st
from .config import ExperimentConfig, dump_config, resolve_with_stats
from .logs import Dataset, dataset_stats, prepare_dataset, read_dataset
from .models import (
    MSG_CONTROL_DELTA, MSG_PARAMS, Batch, ModelSpec, encode_message, evaluate, init_params,
    load_checkpoint, loss_and_grad, save_checkpoint,
)
from .partition import IID, PartitionPlan, materialize, split_iid, split_noniid, train_val_split
from .seeding import derive_seed, hash64, round_rng
from .telemetry import (EventLog, MetricsSink, RoundMetrics, build_report, export, participants_per_round,
                        read_events, read_metrics_csv, render_plots)

logger = logging.getLogger(__name__)

RUNS_DIR_ENV = "FEDLAD_RUNS_DIR"


class RoundError(RuntimeError):
    pass


@dataclass
class ClientRuntime:
    client_id: int
    shard: Dataset
    local_params: np.ndarray
    rng_seed: int
    inputs: np.ndarray = field(init=False, repr=False)
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.shard) == 0:
            raise ValueError(f"client {self.client_id} has an empty shard")
        self.inputs = self.shard.event_matrix()
        self.labels = self.shard.label_vector().astype(np.float64)


@dataclass
class ClientStats:
    client_id: int
    num_samples: int
    local_steps: int
    update_norm: float
    mean_grad_norm: float


@dataclass
class RoundResult:
    round: int
    global_params: np.ndarray
    metrics: RoundMetrics
    decision: ex.Decision
    bytes_up: int
    bytes_down: int


@dataclass
class RunState:
    config: ExperimentConfig
    spec: ModelSpec
    strategy_state: st.StrategyState
    clients: list[ClientRuntime]
    global_params: np.ndarray
    val: Dataset
    policy: ex.AdaptationPolicy
    executor_state: ex.ExecutorState = field(default_factory=ex.ExecutorState)
    history: list[RoundResult] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    stopped: bool = False
    stop_reason: str | None = None
    run_dir: Path | None = None
    sink: MetricsSink | None = field(default=None, repr=False)
    event_log: EventLog | None = field(default=None, repr=False)
    initial_params: np.ndarray | None = field(default=None, repr=False)
    plan: PartitionPlan | None = field(default=None, repr=False)


def strategy_params(config: ExperimentConfig) -> st.StrategyParams:
    s = config.strategy
    return st.StrategyParams(mu=s.mu or 0.0, eta=s.eta, beta1=s.beta1, beta2=s.beta2,
                             tau=s.tau, global_lr=s.global_lr)


def adaptation_policy(config: ExperimentConfig) -> ex.AdaptationPolicy:
    a = config.adaptation
    return ex.AdaptationPolicy(a.patience, a.f1_drop_delta, a.min_improve, tuple(a.switch_chain),
                               a.enable_early_stop, a.enable_switch)


def sample_clients(k: int, fraction: float, round_index: int, seed: int) -> list[int]:
    if not 0 < fraction <= 1:
        raise ValueError("participation fraction must be in (0, 1]")
    m = participants_per_round(k, fraction)
    if m == k:
        return list(range(k))
    rng = round_rng(derive_seed(seed, "participation"), round_index)
    return sorted(int(c) for c in rng.choice(k, size=m, replace=False))


def local_train(client: ClientRuntime, directive: st.LocalTrainingDirective, spec: ModelSpec,
                global_params: np.ndarray, round_index: int,
                server_c: np.ndarray | None = None,
                client_c: np.ndarray | None = None) -> tuple[st.ClientUpdate, ClientStats]:
    """Mini-batch gradient descent on one shard, starting from the global model.

    ``server_c``/``client_c`` are only given under Scaffold; the update then
    carries the control-variate delta.
    """
    rng = round_rng(client.rng_seed, round_index)
    params = global_params.copy()
    n = len(client.labels)
    steps = 0
    grad_norm_sum = 0.0
    for _ in range(directive.epochs):
        order = rng.permutation(n)
        for start in range(0, n, directive.batch_size):
            idx = order[start:start + directive.batch_size]
            _, grad = loss_and_grad(spec, params, Batch(client.inputs[idx], client.labels[idx]))
            grad_norm_sum += float(np.linalg.norm(grad))
            if directive.prox_mu > 0:
                grad = st.fedprox_gradient(grad, params, global_params, directive.prox_mu)
            params = st.sgd_step(params, grad, directive.lr, directive.correction)
            steps += 1
    if server_c is not None:
        c_i = client_c if client_c is not None else np.zeros_like(server_c)
        update, _ = st.scaffold_client_finalize(params, global_params, server_c, c_i, directive.lr,
                                                steps, client.client_id, n)
    else:
        update = st.ClientUpdate(client.client_id, params, n)
    stats = ClientStats(client.client_id, n, steps, float(np.linalg.norm(params - global_params)),
                        grad_norm_sum / max(steps, 1))
    return update, stats


# -- setup -------------------------------------------------------------------

def runs_root(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(RUNS_DIR_ENV) or config.output_dir)


def load_data(config: ExperimentConfig) -> Dataset:
    d = config.dataset
    if d.path.endswith(".jsonl"):
        dataset, _ = read_dataset(d.path)
        if len(dataset) and len(dataset.sequences[0].events) != d.window_size:
            raise ValueError(f"dataset.window_size={d.window_size} does not match prepared windows")
        return dataset
    dataset, _ = prepare_dataset(d.path, d.label_mode, d.labels, d.window_size, d.step)
    return dataset


def build_run(config: ExperimentConfig, dataset: Dataset | None = None,
              run_dir: Path | None = None) -> RunState:
    if dataset is None:
        dataset = load_data(config)
    if config.auto_configure:
        config = resolve_with_stats(config, dataset_stats(dataset))
    seed = config.seed
    train, val = train_val_split(dataset, config.dataset.val_fraction, derive_seed(seed, "split"))
    p = config.partition
    part_seed = derive_seed(seed, "partition")
    if p.regime == IID:
        plan = split_iid(train, p.k, part_seed)
    else:
        plan = split_noniid(train, p.k, p.alpha, part_seed)
    shards = materialize(plan, train)
    spec = ModelSpec(config.model.kind, dataset.vocab_size, config.dataset.window_size,
                     config.model.hidden_dim if config.model.kind == "seq_mlp" else 0)
    params = init_params(spec, derive_seed(seed, "init"))
    clients = [ClientRuntime(i, shard, params.copy(), hash64(seed, i)) for i, shard in enumerate(shards)]
    strategy = st.new_state(config.strategy.kind, strategy_params(config), spec.param_length)
    return RunState(config, spec, strategy, clients, params, val, adaptation_policy(config),
                    run_dir=run_dir, initial_params=params.copy(), plan=plan)


def _open_outputs(state: RunState) -> None:
    run_dir = state.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "ckpt").mkdir(exist_ok=True)
    (run_dir / "effective_config.yaml").write_text(dump_config(state.config), encoding="utf-8")
    (run_dir / "partition.json").write_text(state.plan.to_json() + "\n", encoding="utf-8")
    state.sink = MetricsSink(run_dir / "metrics.csv", [r.metrics for r in state.history])
    state.event_log = EventLog(run_dir / "events.jsonl", state.events)
    if not state.history:
        (run_dir / "clients.jsonl").write_text("", encoding="utf-8")


# -- round loop --------------------------------------------------------------

def run_round(state: RunState) -> RoundResult:
    if state.stopped:
        raise RuntimeError("run already stopped")
    cfg = state.config
    rnd = len(state.history) + 1
    tr = cfg.training
    started = time.perf_counter()
    participants = sample_clients(len(state.clients), tr.participation_fraction, rnd, cfg.seed)
    if not participants:
        raise RoundError(f"round {rnd}: no participants sampled")
    strategy = state.strategy_state
    x = state.global_params
    kind = strategy.kind
    strategy.in_round = True
    try:
        def train_one(cid: int):
            directive = st.make_directive(strategy, cid, epochs=tr.epochs, lr=tr.lr, batch_size=tr.batch_size)
            server_c = client_c = None
            if kind == st.SCAFFOLD:
                server_c, client_c = strategy.server_c, strategy.client_c.get(cid)
            return local_train(state.clients[cid], directive, state.spec, x, rnd, server_c, client_c)

        if tr.workers > 1 and len(participants) > 1:
            with ThreadPoolExecutor(max_workers=tr.workers) as pool:
                results = list(pool.map(train_one, participants))
        else:
            results = [train_one(cid) for cid in participants]
        results.sort(key=lambda r: r[0].client_id)
        updates = [u for u, _ in results]

        down_msg = len(encode_message(x, state.spec.kind, MSG_PARAMS))
        bytes_down = down_msg * len(participants)
        bytes_up = 0
        for u in updates:
            bytes_up += len(encode_message(u.params, state.spec.kind, MSG_PARAMS))
            if u.control_delta is not None:
                bytes_up += len(encode_message(u.control_delta, state.spec.kind, MSG_CONTROL_DELTA))

        new_global = st.aggregate(strategy, x, updates, len(state.clients))
    except Exception as exc:
        raise RoundError(f"round {rnd}: {exc}") from exc
    finally:
        strategy.in_round = False

    ev = evaluate(state.spec, new_global, state.val)
    wall_ms = (time.perf_counter() - started) * 1000.0 if cfg.record_wall_time else 0.0
    metrics = RoundMetrics(rnd, ev.loss, ev.precision, ev.recall, ev.f1, ev.accuracy,
                           bytes_up, bytes_down, wall_ms, kind).quantized()
    if state.sink is not None:
        state.sink.record_round(metrics)

    state.executor_state, decision, event = ex.observe(state.executor_state, state.policy, metrics)
    record = event.to_json()
    record["strategy"] = kind
    state.events.append(record)
    if state.event_log is not None:
        state.event_log.append(record)

    if decision.kind == ex.SWITCH:
        state.strategy_state = st.hot_swap(strategy, decision.target)
    elif decision.kind == ex.EARLY_STOP:
        state.stopped = True
        state.stop_reason = decision.reason

    state.global_params = new_global
    for cid in participants:
        state.clients[cid].local_params = new_global.copy()

    result = RoundResult(rnd, new_global, metrics, decision, bytes_up, bytes_down)
    state.history.append(result)
    if state.run_dir is not None:
        _persist_round(state, result, [s for _, s in results], participants)
    return result


def _persist_round(state: RunState, result: RoundResult, stats: list[ClientStats],
                   participants: list[int]) -> None:
    run_dir = state.run_dir
    save_checkpoint(run_dir / "ckpt" / f"round_{result.round}.bin", state.spec, result.global_params)
    total = sum(s.num_samples for s in stats)
    with (run_dir / "clients.jsonl").open("a", encoding="utf-8") as fh:
        for s in stats:
            fh.write(json.dumps({"round": result.round, "client_id": s.client_id,
                                 "num_samples": s.num_samples, "weight": round(s.num_samples / total, 6),
                                 "local_steps": s.local_steps, "update_norm": round(s.update_norm, 6),
                                 "mean_grad_norm": round(s.mean_grad_norm, 6)}) + "\n")
    _save_state(state)


def _save_state(state: RunState) -> None:
    payload = {
        "round": len(state.history),
        "stopped": state.stopped,
        "stop_reason": state.stop_reason,
        "strategy": st.state_to_json(state.strategy_state),
        "executor": ex.state_to_json(state.executor_state),
    }
    (state.run_dir / "state.json").write_text(json.dumps(payload) + "\n", encoding="utf-8")


def finalize(state: RunState) -> str:
    """Write exports, plots and the text report; return the report."""
    run_dir = state.run_dir
    history = [r.metrics for r in state.history]
    if history:
        export(history, state.events, run_dir)
        render_plots(history, run_dir)
    else:
        (run_dir / "metrics.json").write_text("[]\n", encoding="utf-8")
    report = final_report(state)
    (run_dir / "report.txt").write_text(report, encoding="utf-8")
    if run_dir is not None:
        _save_state(state)
    return report


def final_report(state: RunState) -> str:
    cfg = state.config
    return build_report(cfg.run_id, cfg.to_dict(), dump_config(cfg),
                        [r.metrics for r in state.history], state.events)


def resume(config: ExperimentConfig, run_dir: Path, dataset: Dataset | None = None) -> RunState:
    """Rebuild a run from its directory: state.json, metrics, events, latest checkpoint."""
    state = build_run(config, dataset, run_dir=run_dir)
    saved = json.loads((run_dir / "state.json").read_text(encoding="utf-8"))
    metrics = read_metrics_csv(run_dir / "metrics.csv")[: saved["round"]]
    state.events = read_events(run_dir / "events.jsonl")[: saved["round"]]
    for m, evt in zip(metrics, state.events):
        _, params = load_checkpoint(run_dir / "ckpt" / f"round_{m.round}.bin")
        decision = _decision_from_str(evt["decision"])
        state.history.append(RoundResult(m.round, params, m, decision, m.bytes_up, m.bytes_down))
    if state.history:
        state.global_params = state.history[-1].global_params.copy()
        for c in state.clients:
            c.local_params = state.global_params.copy()
    state.strategy_state = st.state_from_json(saved["strategy"])
    state.executor_state = ex.state_from_json(saved["executor"])
    state.stopped = saved["stopped"]
    state.stop_reason = saved["stop_reason"]
    return state


def _decision_from_str(text: str) -> ex.Decision:
    if text.startswith("switch:"):
        return ex.Decision(ex.SWITCH, target=text.split(":", 1)[1])
    if text.startswith("early_stop:"):
        return ex.Decision(ex.EARLY_STOP, reason=text.split(":", 1)[1])
    return ex.Decision(ex.CONTINUE)


def run_experiment(config: ExperimentConfig, *, dataset: Dataset | None = None,
                   run_dir: Path | None = None, resume_run: bool = False,
                   write_outputs: bool = True,
                   on_round: Callable[[RoundResult], None] | None = None) -> RunState:
    if write_outputs and run_dir is None:
        run_dir = runs_root(config) / config.run_id
    if resume_run:
        state = resume(config, run_dir, dataset)
    else:
        state = build_run(config, dataset, run_dir if write_outputs else None)
    if write_outputs:
        _open_outputs(state)
        if not state.history:
            _save_state(state)
    while not state.stopped and len(state.history) < state.config.training.max_rounds:
        result = run_round(state)
        if on_round is not None:
            on_round(result)
    if not state.stopped:
        state.stop_reason = "max_rounds"
    if write_outputs:
        finalize(state)
    return state
