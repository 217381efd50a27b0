from __future__ import annotations

import numpy as np
import pytest

from fedlad import engine
from fedlad import strategies as st
from fedlad.config import parse_config
from fedlad.logs import prepare_dataset
from fedlad.models import Batch, ModelSpec, init_params, loss_and_grad
from fedlad.partition import train_val_split
from fedlad.seeding import derive_seed, hash64, round_rng

from oracles import centralized_sgd


@pytest.fixture(scope="module")
def small_dataset(small_corpus):
    log, labels = small_corpus
    return prepare_dataset(log, "session", labels, 10, 10)[0]


def _config(**over):
    raw = {"dataset": {"path": "unused.jsonl"}, "model": {"kind": "logistic_counts"},
           "partition": {"k": 3}, "training": {"max_rounds": 3, "lr": 0.5, "batch_size": 16}, "seed": 11}
    for key, value in over.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return parse_config(raw)


def _run(dataset, tmp_path=None, **over):
    cfg = _config(**over)
    return engine.run_experiment(cfg, dataset=dataset, run_dir=tmp_path, write_outputs=tmp_path is not None)


def test_sample_clients():
    assert engine.sample_clients(5, 1.0, 1, 0) == [0, 1, 2, 3, 4]
    assert len(engine.sample_clients(50, 1e-6, 3, 0)) == 1
    assert engine.sample_clients(20, 0.3, 4, 9) == engine.sample_clients(20, 0.3, 4, 9)
    picked = {tuple(engine.sample_clients(20, 0.3, r, 9)) for r in range(1, 6)}
    assert len(picked) > 1
    with pytest.raises(ValueError):
        engine.sample_clients(5, 0.0, 1, 0)


def test_single_client_matches_centralized_training(small_dataset):
    seed, rounds = 11, 5
    state = _run(small_dataset, partition={"k": 1}, training={"max_rounds": rounds, "epochs": 2}, seed=seed)
    train, _ = train_val_split(small_dataset, 0.1, derive_seed(seed, "split"))
    spec = ModelSpec("logistic_counts", small_dataset.vocab_size, 10)
    client_seed = hash64(seed, 0)
    expected = centralized_sgd(spec, init_params(spec, derive_seed(seed, "init")), train.event_matrix(),
                               train.label_vector(), rounds=rounds, epochs=2, lr=0.5, batch_size=16,
                               rng_for_round=lambda r: round_rng(client_seed, r))
    np.testing.assert_array_equal(state.global_params, expected)


def test_identical_client_params_average_to_same(small_dataset):
    p = np.arange(5, dtype=np.float64)
    ups = [st.ClientUpdate(i, p.copy(), n) for i, n in enumerate((3, 7, 11))]
    np.testing.assert_array_equal(st.aggregate(st.new_state("fedavg", st.StrategyParams(), 5), p * 0, ups, 3), p)


def test_local_train_zero_lr_leaves_params(small_dataset):
    state = engine.build_run(_config(), small_dataset)
    directive = st.LocalTrainingDirective(1, 0.0, 16)
    update, stats = engine.local_train(state.clients[0], directive, state.spec, state.global_params, 1)
    np.testing.assert_array_equal(update.params, state.global_params)
    assert stats.local_steps == -(-stats.num_samples // 16)


def test_local_train_is_deterministic(small_dataset):
    state = engine.build_run(_config(), small_dataset)
    directive = st.LocalTrainingDirective(2, 0.3, 8)
    a, _ = engine.local_train(state.clients[1], directive, state.spec, state.global_params, 4)
    b, _ = engine.local_train(state.clients[1], directive, state.spec, state.global_params, 4)
    np.testing.assert_array_equal(a.params, b.params)
    c, _ = engine.local_train(state.clients[1], directive, state.spec, state.global_params, 5)
    assert not np.array_equal(a.params, c.params)


def test_large_prox_mu_pulls_towards_global(small_dataset):
    state = engine.build_run(_config(), small_dataset)
    # lr * mu must stay below 2 for the proximal step to contract
    plain, _ = engine.local_train(state.clients[0], st.LocalTrainingDirective(1, 1e-6, 16),
                                  state.spec, state.global_params, 1)
    prox, _ = engine.local_train(state.clients[0], st.LocalTrainingDirective(1, 1e-6, 16, prox_mu=1e6),
                                 state.spec, state.global_params, 1)
    g = state.global_params
    assert np.linalg.norm(prox.params - g) < np.linalg.norm(plain.params - g)


def test_fedprox_zero_mu_trajectory_equals_fedavg(small_dataset):
    avg = _run(small_dataset, training={"max_rounds": 5})
    prox = _run(small_dataset, training={"max_rounds": 5}, strategy={"kind": "fedprox", "mu": 0.0},
                adaptation={"switch_chain": ["fedprox"]})
    for a, b in zip(avg.history, prox.history):
        np.testing.assert_array_equal(a.global_params, b.global_params)


def test_scaffold_first_round_local_epoch_equals_fedavg(small_dataset):
    avg = engine.build_run(_config(), small_dataset)
    sc = engine.build_run(_config(strategy={"kind": "scaffold"}, adaptation={"switch_chain": ["scaffold"]}),
                          small_dataset)
    for cid in range(3):
        d_avg = st.make_directive(avg.strategy_state, cid, epochs=1, lr=0.5, batch_size=16)
        d_sc = st.make_directive(sc.strategy_state, cid, epochs=1, lr=0.5, batch_size=16)
        u_avg, _ = engine.local_train(avg.clients[cid], d_avg, avg.spec, avg.global_params, 1)
        u_sc, _ = engine.local_train(sc.clients[cid], d_sc, sc.spec, sc.global_params, 1,
                                     sc.strategy_state.server_c, None)
        np.testing.assert_array_equal(u_avg.params, u_sc.params)
        assert u_sc.control_delta is not None


@pytest.mark.parametrize("kind, extra", [("scaffold", {}), ("fedadam", {"eta": 0.05}), ("fedprox", {"mu": 0.1})])
def test_every_strategy_runs(small_dataset, kind, extra):
    state = _run(small_dataset, strategy={"kind": kind, **extra}, adaptation={"switch_chain": [kind]})
    assert len(state.history) == 3
    assert all(np.isfinite(r.global_params).all() for r in state.history)


def test_scaffold_uplink_carries_control_delta(small_dataset):
    sc = _run(small_dataset, strategy={"kind": "scaffold"}, adaptation={"switch_chain": ["scaffold"]})
    avg = _run(small_dataset)
    assert sc.history[0].bytes_up == 2 * avg.history[0].bytes_up
    assert sc.history[0].bytes_down == avg.history[0].bytes_down


def test_max_rounds_zero(small_dataset, tmp_path):
    state = _run(small_dataset, tmp_path, training={"max_rounds": 0})
    assert state.history == []
    np.testing.assert_array_equal(state.global_params, state.initial_params)
    assert "total rounds: 0" in (tmp_path / "report.txt").read_text()


def test_early_stop_truncates_history(small_dataset):
    state = _run(small_dataset, training={"max_rounds": 30},
                 adaptation={"patience": 1, "min_improve": 0.5, "enable_early_stop": True})
    assert state.stopped and state.stop_reason == "stagnation"
    assert len(state.history) == 2


def test_threaded_workers_match_serial(small_dataset):
    serial = _run(small_dataset)
    threaded = _run(small_dataset, training={"workers": 3})
    np.testing.assert_array_equal(serial.global_params, threaded.global_params)


def test_run_directory_contents(small_dataset, tmp_path):
    _run(small_dataset, tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"metrics.csv", "metrics.json", "events.jsonl", "report.txt", "effective_config.yaml",
            "partition.json", "clients.jsonl", "state.json", "ckpt", "f1.svg", "loss.svg"} <= names
    assert sorted(p.name for p in (tmp_path / "ckpt").glob("*.bin")) == [f"round_{r}.bin" for r in (1, 2, 3)]


def test_resume_matches_uninterrupted_run(small_dataset, tmp_path):
    full = _run(small_dataset, tmp_path / "full", training={"max_rounds": 6})
    _run(small_dataset, tmp_path / "part", training={"max_rounds": 3})
    resumed = engine.run_experiment(_config(training={"max_rounds": 6}), dataset=small_dataset,
                                    run_dir=tmp_path / "part", resume_run=True)
    np.testing.assert_array_equal(resumed.global_params, full.global_params)
    for name in ("metrics.csv", "events.jsonl", "report.txt"):
        assert (tmp_path / "part" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()


def test_round_error_wraps_failures(small_dataset):
    state = engine.build_run(_config(), small_dataset)
    state.global_params = np.full_like(state.global_params, np.inf)
    with pytest.raises(engine.RoundError):
        with np.errstate(all="ignore"):
            engine.run_round(state)


def test_gradient_helper_agrees_with_engine_batches(small_dataset):
    # sanity: a batch built from the cached client arrays matches the dataset path
    state = engine.build_run(_config(), small_dataset)
    c = state.clients[0]
    spec = state.spec
    a = loss_and_grad(spec, state.global_params, Batch(c.inputs, c.labels))
    b = loss_and_grad(spec, state.global_params, Batch.from_dataset(c.shard))
    assert a[0] == b[0]
