from __future__ import annotations

import pytest
import yaml

from fedlad.config import (
    ConfigError,
    apply_suggestions,
    auto_configure,
    dump_config,
    load_config,
    parse_config,
    resolve_with_stats,
)
from fedlad.logs import DatasetStats

MINIMAL = {"dataset": {"path": "data.jsonl"}, "model": {"kind": "logistic_counts"}}


def _with(**sections):
    raw = {"dataset": {"path": "data.jsonl"}, "model": {"kind": "logistic_counts"}}
    for name, values in sections.items():
        if isinstance(values, dict):
            raw.setdefault(name, {}).update(values)
        else:
            raw[name] = values
    return raw


def _stats(n):
    return DatasetStats(n, 20, 0.03, 2.0)


def test_minimal_config_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.partition.k == 10
    assert (cfg.dataset.window_size, cfg.dataset.step) == (10, 10)
    assert cfg.strategy.kind == "fedavg"
    assert cfg.training.max_rounds == 30
    assert cfg.training.participation_fraction == 1.0
    assert cfg.adaptation.switch_chain == ["fedavg"]
    assert cfg.seed == 0 and cfg.run_id == "run"


@pytest.mark.parametrize("raw, message", [
    (_with(partition={"k": 0}), "partition.k must be ≥ 1"),
    (_with(strategy={"kind": "fedprox"}), "strategy.mu required for fedprox"),
    (_with(strategy={"kind": "fedsgd"}), "strategy.kind must be one of"),
    (_with(partition={"alpha": 0.0}), "partition.alpha must be > 0"),
    (_with(training={"lr": "fast"}), "training.lr must be of type float"),
    (_with(training={"participation_fraction": 1.5}), "training.participation_fraction"),
    (_with(adaptation={"f1_drop_delta": 1.0}), "adaptation.f1_drop_delta"),
    (_with(training={"epochs": True}), "training.epochs must be of type int"),
    (_with(partition={"shards": 3}), "partition.shards is not a recognised key"),
    (_with(colour="red"), "colour is not a recognised key"),
    ({"model": {"kind": "seq_mlp"}}, "dataset.path is required"),
    ({"dataset": {"path": "x.jsonl"}}, "model.kind is required"),
    (_with(dataset={"path": "raw.log"}), "dataset.labels required"),
    (_with(adaptation={"switch_chain": ["scaffold", "fedavg"]}), "must start with strategy.kind"),
    (_with(adaptation={"enable_switch": True}), "adaptation.switch_chain needs at least two"),
    (_with(adaptation={"switch_chain": ["fedavg", "fedprox"]}), "strategy.mu required for fedprox"),
    ([1, 2], "<root> must be a mapping"),
])
def test_config_errors(raw, message):
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    assert message in str(info.value)


def test_error_names_key():
    with pytest.raises(ConfigError) as info:
        parse_config(_with(strategy={"kind": "nope"}))
    assert info.value.key == "strategy.kind"


def test_int_accepted_for_float_field():
    assert parse_config(_with(training={"lr": 1})).training.lr == 1.0


def test_yaml_round_trip(tmp_path):
    raw = _with(strategy={"kind": "fedprox", "mu": 0.01}, partition={"regime": "noniid", "alpha": 0.3},
                adaptation={"switch_chain": ["fedprox", "scaffold"], "enable_switch": True}, seed=42)
    cfg = parse_config(raw)
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back == cfg
    assert dump_config(back) == dump_config(cfg)


def test_load_rejects_bad_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("dataset: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_user_keys_are_tracked():
    cfg = parse_config(_with(training={"lr": 0.5}, seed=3))
    assert {"training.lr", "seed", "dataset.path", "model.kind"} <= cfg.user_keys
    assert "training.batch_size" not in cfg.user_keys


@pytest.mark.parametrize("n, k", [(500_000, 50), (5000, 2), (10, 2), (4, 2), (2_000_000, 100)])
def test_auto_configure_clients(n, k):
    assert auto_configure(_stats(n))["partition"]["k"] == k


def test_auto_configure_too_small():
    with pytest.raises(ValueError, match="dataset too small to federate"):
        auto_configure(_stats(3))


def test_auto_configure_is_deterministic_and_bounded():
    a, b = auto_configure(_stats(123_456)), auto_configure(_stats(123_456))
    assert a == b
    assert 8 <= a["training"]["batch_size"] <= 256
    assert auto_configure(_stats(5000), "seq_mlp")["training"]["lr"] < a["training"]["lr"]


def test_user_values_beat_suggestions():
    merged = apply_suggestions({"partition": {"k": 7}}, {"partition": {"k": 2}, "training": {"lr": 0.3}})
    assert merged == {"partition": {"k": 7}, "training": {"lr": 0.3}}


def test_resolve_precedence_user_over_suggestion_over_default():
    cfg = parse_config(_with(auto_configure=True, training={"lr": 0.7}))
    resolved = resolve_with_stats(cfg, _stats(500_000))
    assert resolved.training.lr == 0.7          # user wins
    assert resolved.partition.k == 50            # suggestion beats default 10
    assert resolved.training.epochs == 1         # default when neither says anything
    assert yaml.safe_load(dump_config(resolved))["partition"]["k"] == 50
