"""Per-round metric log, exports, SVG plots and the plain-text run report."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

CSV_HEADER = ("round", "val_loss", "precision", "recall", "f1", "accuracy",
              "bytes_up", "bytes_down", "wall_ms", "strategy")
_FLOAT_FIELDS = ("val_loss", "precision", "recall", "f1", "accuracy", "wall_ms")
MB = 1_000_000


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    val_loss: float
    precision: float
    recall: float
    f1: float
    accuracy: float
    bytes_up: int
    bytes_down: int
    wall_ms: float
    active_strategy: str

    def __post_init__(self) -> None:
        if self.round < 1:
            raise ValueError("round must be >= 1")
        for name in ("precision", "recall", "f1", "accuracy"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")

    def quantized(self) -> "RoundMetrics":
        """Copy with floats rounded to the 6 decimals the logs keep."""
        return RoundMetrics(**{k: (round(v, 6) if k in _FLOAT_FIELDS else v) for k, v in asdict(self).items()})

    def csv_row(self) -> str:
        return (f"{self.round},{self.val_loss:.6f},{self.precision:.6f},{self.recall:.6f},"
                f"{self.f1:.6f},{self.accuracy:.6f},{self.bytes_up},{self.bytes_down},"
                f"{self.wall_ms:.6f},{self.active_strategy}")

    def to_json(self) -> dict:
        out = {k: (round(v, 6) if k in _FLOAT_FIELDS else v) for k, v in asdict(self).items()}
        out["strategy"] = out.pop("active_strategy")
        return out


class MetricsSink:
    """Append-only metric log flushed to ``metrics.csv`` after every round."""

    def __init__(self, csv_path: str | Path, history: Sequence[RoundMetrics] = ()) -> None:
        self.path = Path(csv_path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.history: list[RoundMetrics] = []
        with self.path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(CSV_HEADER) + "\n")
        for m in history:
            self.record_round(m)

    def record_round(self, metrics: RoundMetrics) -> None:
        expected = self.history[-1].round + 1 if self.history else 1
        if metrics.round != expected:
            raise ValueError(f"out-of-order round {metrics.round}; expected {expected}")
        self.history.append(metrics)
        with self.path.open("a", encoding="utf-8", newline="\n") as fh:
            fh.write(metrics.csv_row() + "\n")
            fh.flush()


def record_round(sink: MetricsSink, metrics: RoundMetrics) -> None:
    sink.record_round(metrics)


class EventLog:
    def __init__(self, path: str | Path, events: Iterable[dict] = ()) -> None:
        self.path = Path(path)
        self.events: list[dict] = []
        self.path.write_text("", encoding="utf-8")
        for ev in events:
            self.append(ev)

    def append(self, event: dict) -> None:
        self.events.append(event)
        with self.path.open("a", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(event, sort_keys=False) + "\n")
            fh.flush()


def write_metrics_csv(history: Sequence[RoundMetrics], path: str | Path) -> Path:
    path = Path(path)
    lines = [",".join(CSV_HEADER)] + [m.csv_row() for m in history]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return path


def read_metrics_csv(path: str | Path) -> list[RoundMetrics]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            out.append(RoundMetrics(
                int(row["round"]), float(row["val_loss"]), float(row["precision"]), float(row["recall"]),
                float(row["f1"]), float(row["accuracy"]), int(row["bytes_up"]), int(row["bytes_down"]),
                float(row["wall_ms"]), row["strategy"]))
    return out


def read_events(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def export(history: Sequence[RoundMetrics], events: Sequence[dict], out_dir: str | Path,
           formats: Iterable[str] = ("csv", "json")) -> list[Path]:
    if not history:
        raise ValueError("nothing to export: empty history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            written.append(write_metrics_csv(history, out_dir / "metrics.csv"))
        elif fmt == "json":
            path = out_dir / "metrics.json"
            path.write_text(json.dumps([m.to_json() for m in history], indent=1) + "\n", encoding="utf-8")
            written.append(path)
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    ev_path = out_dir / "events.jsonl"
    ev_path.write_text("".join(json.dumps(e) + "\n" for e in events), encoding="utf-8")
    written.append(ev_path)
    return written


# -- plots -------------------------------------------------------------------

_W, _H, _PAD = 480, 300, 40


def _svg_line_chart(xs: Sequence[float], ys: Sequence[float], title: str, ylabel: str) -> str:
    lo, hi = min(ys), max(ys)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    x0, x1 = xs[0], xs[-1]
    span_x = (x1 - x0) or 1.0

    def px(x: float) -> float:
        return _PAD + (x - x0) / span_x * (_W - 2 * _PAD)

    def py(y: float) -> float:
        return _H - _PAD - (y - lo) / (hi - lo) * (_H - 2 * _PAD)

    points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.0f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<text x="{_W / 2:.0f}" y="{_H - 8}" text-anchor="middle" font-family="sans-serif" font-size="11">round</text>',
        f'<text x="12" y="{_H / 2:.0f}" transform="rotate(-90 12 {_H / 2:.0f})" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11">{ylabel}</text>',
        f'<text x="{_PAD - 4}" y="{_PAD + 4}" text-anchor="end" font-family="sans-serif" font-size="9">{hi:.4f}</text>',
        f'<text x="{_PAD - 4}" y="{_H - _PAD}" text-anchor="end" font-family="sans-serif" font-size="9">{lo:.4f}</text>',
        f'<text x="{_PAD}" y="{_H - _PAD + 14}" text-anchor="middle" font-family="sans-serif" font-size="9">{x0:g}</text>',
        f'<text x="{_W - _PAD}" y="{_H - _PAD + 14}" text-anchor="middle" font-family="sans-serif" font-size="9">{x1:g}</text>',
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{points}"/>',
        "</svg>",
        "",
    ])


def render_plots(history: Sequence[RoundMetrics], out_dir: str | Path) -> list[Path]:
    if len(history) < 2:
        logger.info("fewer than 2 rounds recorded; plots skipped")
        return []
    out_dir = Path(out_dir)
    rounds = [m.round for m in history]
    charts = {
        "f1.svg": _svg_line_chart(rounds, [m.f1 for m in history], "F1-score over rounds", "f1"),
        "loss.svg": _svg_line_chart(rounds, [m.val_loss for m in history], "Loss over rounds", "validation loss"),
    }
    paths = []
    for name, text in charts.items():
        path = out_dir / name
        path.write_text(text, encoding="utf-8", newline="\n")
        paths.append(path)
    return paths


# -- report ------------------------------------------------------------------

def config_digest(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()[:16]


def strategy_trajectory(history: Sequence[RoundMetrics], events: Sequence[dict]) -> str:
    if not history:
        return "-"
    parts = [history[0].active_strategy]
    for ev in events:
        decision = ev.get("decision", "")
        if decision.startswith("switch:"):
            parts.append(f"{decision.split(':', 1)[1]} @ round {ev['round']}")
    return " → ".join(parts)


def stop_line(history: Sequence[RoundMetrics], events: Sequence[dict]) -> str:
    last = history[-1].round if history else 0
    for ev in reversed(events):
        decision = ev.get("decision", "")
        if decision.startswith("early_stop:"):
            return f"stopped: {decision.split(':', 1)[1]} @ round {ev['round']}"
    return f"stopped: max_rounds @ round {last}"


def participants_per_round(k: int, fraction: float) -> int:
    """Clients sampled each round: ``max(1, round(fraction*k))``, capped at k."""
    return min(k, max(1, int(round(fraction * k))))


def build_report(run_id: str, config: dict, config_text: str, history: Sequence[RoundMetrics],
                 events: Sequence[dict]) -> str:
    """Fixed-layout report computed only from config, metrics and events."""
    part = config["partition"]
    regime = part["regime"] if part["regime"] == "iid" else f"{part['regime']} (alpha={part['alpha']})"
    k = part["k"]
    lines = [
        f"run: {run_id}",
        f"config digest: {config_digest(config_text)}",
        f"dataset: {config['dataset']['path']}",
        f"distribution: {regime}, {k} clients",
        f"model: {config['model']['kind']}",
        f"strategy trajectory: {strategy_trajectory(history, events)}",
        stop_line(history, events),
        f"total rounds: {len(history)}",
    ]
    if history:
        best = max(history, key=lambda m: (m.f1, -m.round))
        best_loss = min(history, key=lambda m: (m.val_loss, m.round))
        final = history[-1]
        lines += [
            f"best f1: {best.f1:.6f} @ round {best.round}",
            f"final f1: {final.f1:.6f}",
            f"best loss: {best_loss.val_loss:.6f} @ round {best_loss.round}",
            f"final loss: {final.val_loss:.6f}",
            f"final precision/recall/accuracy: {final.precision:.6f} / {final.recall:.6f} / {final.accuracy:.6f}",
        ]
    # per participating client, summed over rounds
    m_per_round = participants_per_round(k, config["training"]["participation_fraction"])
    down = sum(m.bytes_down for m in history) / m_per_round
    up = sum(m.bytes_up for m in history) / m_per_round
    wall = sum(m.wall_ms for m in history) / 1000.0
    lines += [
        f"total wall time: {wall:.3f} s",
        f"downlink per client: {down / MB:.1f} MB ({down:.0f} bytes)",
        f"uplink per client: {up / MB:.1f} MB ({up:.0f} bytes)",
    ]
    return "\n".join(lines) + "\n"
