"""Experiment configuration: YAML loading, strict validation, auto-suggestions.

Every section is a dataclass whose field metadata carries the range rule, so
validation messages can name the exact key path, e.g. ``partition.k must be ≥ 1``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import yaml

from .logs import LABEL_MODES, SESSION, DatasetStats
from .models import LOGISTIC_COUNTS, MODEL_KINDS
from .partition import IID, NONIID
from .strategies import FEDAVG, FEDPROX, STRATEGY_KINDS

REQUIRED = object()


class ConfigError(ValueError):
    def __init__(self, key: str, message: str) -> None:
        self.key = key
        super().__init__(f"{key} {message}")


def _f(default: Any = REQUIRED, *, kind: type | tuple = None, check: Callable[[Any], bool] | None = None,
       rule: str = "", choices: tuple | None = None, nullable: bool = False):
    meta = {"kind": kind, "check": check, "rule": rule, "choices": choices,
            "nullable": nullable, "required": default is REQUIRED}
    if default is REQUIRED:
        return field(default=None, metadata=meta)
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class DatasetConfig:
    path: str = _f(kind=str)
    label_mode: str = _f(SESSION, kind=str, choices=LABEL_MODES)
    labels: str | None = _f(None, kind=str, nullable=True)
    window_size: int = _f(10, kind=int, check=lambda v: v >= 1, rule="must be ≥ 1")
    step: int = _f(10, kind=int, check=lambda v: v >= 1, rule="must be ≥ 1")
    val_fraction: float = _f(0.1, kind=float, check=lambda v: 0 < v < 1, rule="must be in (0, 1)")


@dataclass
class PartitionConfig:
    k: int = _f(10, kind=int, check=lambda v: v >= 1, rule="must be ≥ 1")
    regime: str = _f(IID, kind=str, choices=(IID, NONIID))
    alpha: float = _f(0.5, kind=float, check=lambda v: v > 0, rule="must be > 0")


@dataclass
class ModelConfig:
    kind: str = _f(kind=str, choices=MODEL_KINDS)
    hidden_dim: int = _f(16, kind=int, check=lambda v: v >= 1, rule="must be ≥ 1")


@dataclass
class TrainingConfig:
    epochs: int = _f(1, kind=int, check=lambda v: v >= 1, rule="must be ≥ 1")
    lr: float = _f(0.1, kind=float, check=lambda v: v > 0, rule="must be > 0")
    batch_size: int = _f(32, kind=int, check=lambda v: v >= 1, rule="must be ≥ 1")
    max_rounds: int = _f(30, kind=int, check=lambda v: v >= 0, rule="must be ≥ 0")
    participation_fraction: float = _f(1.0, kind=float, check=lambda v: 0 < v <= 1, rule="must be in (0, 1]")
    workers: int = _f(1, kind=int, check=lambda v: v >= 1, rule="must be ≥ 1")


@dataclass
class StrategyConfig:
    kind: str = _f(FEDAVG, kind=str, choices=STRATEGY_KINDS)
    mu: float | None = _f(None, kind=float, check=lambda v: v >= 0, rule="must be ≥ 0", nullable=True)
    eta: float = _f(0.01, kind=float, check=lambda v: v > 0, rule="must be > 0")
    beta1: float = _f(0.9, kind=float, check=lambda v: 0 <= v < 1, rule="must be in [0, 1)")
    beta2: float = _f(0.99, kind=float, check=lambda v: 0 <= v < 1, rule="must be in [0, 1)")
    tau: float = _f(1e-3, kind=float, check=lambda v: v > 0, rule="must be > 0")
    global_lr: float = _f(1.0, kind=float, check=lambda v: v > 0, rule="must be > 0")


@dataclass
class AdaptationConfig:
    patience: int = _f(5, kind=int, check=lambda v: v >= 1, rule="must be ≥ 1")
    f1_drop_delta: float = _f(0.05, kind=float, check=lambda v: 0 < v < 1, rule="must be in (0, 1)")
    min_improve: float = _f(1e-4, kind=float, check=lambda v: v >= 0, rule="must be ≥ 0")
    switch_chain: list[str] | None = _f(None, kind=list, nullable=True)
    enable_early_stop: bool = _f(False, kind=bool)
    enable_switch: bool = _f(False, kind=bool)


_SECTIONS = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "strategy": StrategyConfig,
    "adaptation": AdaptationConfig,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    model: ModelConfig
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    run_id: str = "run"
    seed: int = 0
    output_dir: str = "runs"
    auto_configure: bool = False
    record_wall_time: bool = False
    # keys the user wrote explicitly, as dotted paths
    user_keys: frozenset = field(default=frozenset(), compare=False, repr=False)

    def to_dict(self) -> dict:
        out = {"run_id": self.run_id, "seed": self.seed, "output_dir": self.output_dir,
               "auto_configure": self.auto_configure, "record_wall_time": self.record_wall_time}
        for name in _SECTIONS:
            out[name] = asdict(getattr(self, name))
        return out


_TOP_LEVEL = {
    "run_id": (str, "run"),
    "seed": (int, 0),
    "output_dir": (str, "runs"),
    "auto_configure": (bool, False),
    "record_wall_time": (bool, False),
}


def _type_ok(value: Any, kind: type) -> bool:
    if kind is bool:
        return isinstance(value, bool)
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    return isinstance(value, kind)


def _build_section(name: str, cls: type, raw: Any) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "is not a recognised key")
    values = {}
    for f in fields(cls):
        meta = f.metadata
        path = f"{name}.{f.name}"
        if f.name not in raw:
            if meta["required"]:
                raise ConfigError(path, "is required")
            continue
        value = raw[f.name]
        if value is None and meta["nullable"]:
            values[f.name] = None
            continue
        if not _type_ok(value, meta["kind"]):
            raise ConfigError(path, f"must be of type {meta['kind'].__name__}")
        if meta["kind"] is float:
            value = float(value)
        if meta["choices"] is not None and value not in meta["choices"]:
            raise ConfigError(path, f"must be one of {', '.join(meta['choices'])} (got {value!r})")
        if meta["check"] is not None and not meta["check"](value):
            raise ConfigError(path, meta["rule"])
        values[f.name] = value
    return cls(**values)


def _collect_keys(raw: dict) -> frozenset:
    keys = set()
    for k, v in raw.items():
        if k in _SECTIONS and isinstance(v, dict):
            keys.update(f"{k}.{sub}" for sub in v)
        else:
            keys.add(k)
    return frozenset(keys)


def parse_config(raw: Any) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "must be a mapping")
    for key in raw:
        if key not in _SECTIONS and key not in _TOP_LEVEL:
            raise ConfigError(key, "is not a recognised key")
    top = {}
    for key, (kind, _) in _TOP_LEVEL.items():
        if key in raw:
            if not _type_ok(raw[key], kind):
                raise ConfigError(key, f"must be of type {kind.__name__}")
            top[key] = raw[key]
    if "seed" in top and not 0 <= top["seed"] < 2 ** 64:
        raise ConfigError("seed", "must be in [0, 2^64)")
    if "run_id" in top and (not top["run_id"] or "/" in top["run_id"]):
        raise ConfigError("run_id", "must be a nonempty name without '/'")
    if "dataset" not in raw:
        raise ConfigError("dataset.path", "is required")
    if "model" not in raw:
        raise ConfigError("model.kind", "is required")
    sections = {name: _build_section(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()}
    cfg = ExperimentConfig(**sections, **top, user_keys=_collect_keys(raw))
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg: ExperimentConfig) -> None:
    ad, st = cfg.adaptation, cfg.strategy
    if ad.switch_chain is None:
        ad.switch_chain = [st.kind]
    for i, kind in enumerate(ad.switch_chain):
        if not isinstance(kind, str) or kind not in STRATEGY_KINDS:
            raise ConfigError(f"adaptation.switch_chain[{i}]", f"must be one of {', '.join(STRATEGY_KINDS)}")
    if not ad.switch_chain or ad.switch_chain[0] != st.kind:
        raise ConfigError("adaptation.switch_chain", "must start with strategy.kind")
    if ad.enable_switch and len(ad.switch_chain) < 2:
        raise ConfigError("adaptation.switch_chain", "needs at least two entries when enable_switch is set")
    if (st.kind == FEDPROX or FEDPROX in ad.switch_chain) and st.mu is None:
        raise ConfigError("strategy.mu", "required for fedprox")
    if cfg.dataset.label_mode == SESSION and cfg.dataset.labels is None and not cfg.dataset.path.endswith(".jsonl"):
        raise ConfigError("dataset.labels", "required for session label mode on raw logs")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"is not valid YAML: {exc}") from exc
    return parse_config(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical YAML form of the fully resolved config."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False, allow_unicode=True)


# -- auto-configuration -----------------------------------------------------

SEQUENCES_PER_CLIENT = 10_000
SAMPLES_PER_BATCH_DIVISOR = 50


def _clamp(x: float, lo: float, hi: float) -> float:
    return max(lo, min(hi, x))


def auto_configure(stats: DatasetStats, model_kind: str = LOGISTIC_COUNTS) -> dict:
    """Heuristic starting hyperparameters derived from dataset size."""
    n = stats.num_sequences
    k = int(_clamp(n // SEQUENCES_PER_CLIENT, 2, 100))
    if n < 2 * k:
        raise ValueError("dataset too small to federate")
    raw_batch = _clamp(n / (k * SAMPLES_PER_BATCH_DIVISOR), 8, 256)
    batch = int(2 ** round(math.log2(raw_batch)))
    return {
        "partition": {"k": k},
        "training": {
            "batch_size": batch,
            "lr": 0.1 if model_kind == LOGISTIC_COUNTS else 0.01,
            "max_rounds": 30,
        },
    }


def apply_suggestions(raw: dict, suggestions: dict) -> dict:
    """Fill suggested keys the user did not set; user values always win."""
    merged = copy.deepcopy(raw)
    for section, values in suggestions.items():
        target = merged.setdefault(section, {})
        for key, value in values.items():
            target.setdefault(key, value)
    return merged


def resolve_with_stats(cfg: ExperimentConfig, stats: DatasetStats) -> ExperimentConfig:
    """Apply auto-configuration on top of an already-parsed config."""
    raw = cfg.to_dict()
    user_raw: dict = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            picked = {k: v for k, v in value.items() if f"{key}.{k}" in cfg.user_keys}
            if picked:
                user_raw[key] = picked
        elif key in cfg.user_keys:
            user_raw[key] = value
    user_raw.setdefault("dataset", {}).update({"path": cfg.dataset.path})
    user_raw.setdefault("model", {}).update({"kind": cfg.model.kind})
    merged = apply_suggestions(user_raw, auto_configure(stats, cfg.model.kind))
    resolved = parse_config(merged)
    resolved.user_keys = cfg.user_keys
    return resolved
