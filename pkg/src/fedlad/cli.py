"""``fedlad`` command line: prepare, suggest, run, report, synth.

Exit codes: 0 success, 1 runtime failure, 2 user or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import engine, synth
from .config import ConfigError, auto_configure, dump_config, load_config, parse_config
from .logs import LINE, SESSION, LabelModeError, dataset_stats, prepare_dataset, read_dataset, write_dataset
from .models import LOGISTIC_COUNTS, MODEL_KINDS
from .telemetry import build_report, read_events, read_metrics_csv, render_plots

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _print_stats(stats) -> None:
    print(f"sequences: {stats.num_sequences}")
    print(f"vocab_size: {stats.vocab_size}")
    print(f"anomaly_rate: {stats.anomaly_rate:.6f}")
    print(f"mean_sequence_entropy: {stats.mean_sequence_entropy:.6f}")


def cmd_prepare(args: argparse.Namespace) -> int:
    log_path = Path(args.log)
    if not log_path.is_file():
        raise UsageError(f"cannot read log file {log_path}")
    if args.label_mode == SESSION:
        if args.labels is None:
            raise UsageError("session label mode requires --labels CSV")
        if not Path(args.labels).is_file():
            raise UsageError(f"cannot read label file {args.labels}")
    dataset, store = prepare_dataset(log_path, args.label_mode, args.labels, args.window, args.step)
    write_dataset(dataset, args.out, store.vocab())
    print(f"wrote {args.out}")
    _print_stats(dataset_stats(dataset))
    return EXIT_OK


def cmd_suggest(args: argparse.Namespace) -> int:
    path = Path(args.dataset)
    if not path.is_file():
        raise UsageError(f"cannot read dataset {path}")
    dataset, _ = read_dataset(path)
    try:
        suggestion = auto_configure(dataset_stats(dataset), args.model_kind)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sys.stdout.write(yaml.safe_dump(suggestion, sort_keys=False, default_flow_style=False))
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        if not (run_dir / "state.json").is_file():
            root = os.environ.get(engine.RUNS_DIR_ENV) or (
                load_config(args.config).output_dir if args.config else "runs")
            run_dir = Path(root) / args.resume
        if not (run_dir / "state.json").is_file():
            raise UsageError(f"no resumable run at {run_dir}")
        config = load_config(run_dir / "effective_config.yaml")
    else:
        if not args.config:
            raise UsageError("a config file is required")
        config = load_config(args.config)
        run_dir = None
    overrides = config.to_dict()
    user_keys = set(config.user_keys)
    if args.seed is not None:
        overrides["seed"] = args.seed
        user_keys.add("seed")
    if args.max_rounds is not None:
        overrides["training"]["max_rounds"] = args.max_rounds
        user_keys.add("training.max_rounds")
    config = replace(parse_config(overrides), user_keys=frozenset(user_keys))
    if args.print_effective_config:
        sys.stdout.write(dump_config(config))
        return EXIT_OK

    def progress(result: engine.RoundResult) -> None:
        m = result.metrics
        print(f"round {m.round:3d}  strategy={m.active_strategy:<8s} loss={m.val_loss:.6f} "
              f"f1={m.f1:.6f}  decision={result.decision}")

    state = engine.run_experiment(config, run_dir=run_dir, resume_run=bool(args.resume), on_round=progress)
    print(engine.final_report(state), end="")
    print(f"run directory: {state.run_dir}")
    return EXIT_OK


def regenerate_report(run_dir: Path) -> str:
    needed = ["effective_config.yaml", "metrics.csv", "events.jsonl"]
    missing = [n for n in needed if not (run_dir / n).is_file()]
    if missing:
        raise UsageError(f"{run_dir}: missing {', '.join(missing)}")
    config = load_config(run_dir / "effective_config.yaml")
    history = read_metrics_csv(run_dir / "metrics.csv")
    events = read_events(run_dir / "events.jsonl")
    report = build_report(config.run_id, config.to_dict(), dump_config(config), history, events)
    (run_dir / "report.txt").write_text(report, encoding="utf-8")
    render_plots(history, run_dir)
    return report


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"no run directory at {run_dir}")
    print(regenerate_report(run_dir), end="")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    if args.size < 100:
        raise UsageError("--size must be >= 100")
    log_path, label_path = synth.write_corpus(args.profile, args.size, args.seed, args.out)
    print(f"wrote {log_path} and {label_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlad", description="Federated log anomaly detection testbed")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prepare", help="parse a raw log into a labelled sequence dataset")
    p.add_argument("log")
    p.add_argument("--label-mode", choices=(SESSION, LINE), default=SESSION)
    p.add_argument("--labels", help="key,label CSV of anomalous sessions (session mode)")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--step", type=int, default=10)
    p.add_argument("--out", required=True, help="output .jsonl; vocab.json is written alongside")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("suggest", help="suggest hyperparameters for a prepared dataset")
    p.add_argument("dataset")
    p.add_argument("--model-kind", choices=MODEL_KINDS, default=LOGISTIC_COUNTS)
    p.set_defaults(func=cmd_suggest)

    p = sub.add_parser("run", help="run a federated experiment")
    p.add_argument("config", nargs="?")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--resume", metavar="RUN_ID", help="continue an existing run (id or directory)")
    p.add_argument("--print-effective-config", action="store_true",
                   help="print the resolved config as YAML and exit")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="regenerate report.txt and plots from a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic HDFS-style corpus")
    p.add_argument("--profile", choices=synth.PROFILES, default="separable")
    p.add_argument("--size", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, LabelModeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level exit-code contract
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
