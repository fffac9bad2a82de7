"""Command-line entry points.

Subcommands: ``train`` (federated training only), ``attack`` (full
pipeline for one attack config), ``sweep`` (full pipeline over a
parameter grid) and ``report`` (summarize previously written CSVs).

Exit codes: 0 on success, 2 for configuration or usage errors, 1 for
runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import defaultdict
from pathlib import Path

from . import __version__
from .experiment import (
    ConfigError,
    ExperimentConfig,
    emit_csv,
    parse_config_file,
    run_experiment,
    run_sweep,
    train_models,
)
from .federated import write_round_history
from .model import PRESETS

log = logging.getLogger("fedadv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedadv",
        description="Federated training with differential privacy and "
                    "adversarial-transfer measurement.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--verbose", action="store_true",
                        help="enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="path to a key=value config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the experiment seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--preset", choices=PRESETS, default=None,
                       help="override the model preset")
        p.add_argument("--no-cache", action="store_true",
                       help="ignore and skip the trained-model cache")

    p_train = sub.add_parser("train", help="run federated training only")
    add_run_args(p_train)
    p_train.set_defaults(func=cmd_train)

    p_attack = sub.add_parser("attack", help="train, attack, and emit metrics")
    add_run_args(p_attack)
    p_attack.set_defaults(func=cmd_attack)

    p_sweep = sub.add_parser("sweep", help="attack over a parameter grid")
    add_run_args(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="summarize emitted CSV tables")
    p_report.add_argument("--out", default="out",
                          help="directory holding results.csv")
    p_report.set_defaults(func=cmd_report)
    return parser


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    config = parse_config_file(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        config.seed = args.seed
        config.fed.seed = args.seed
    if args.out is not None:
        config.output_dir = args.out
    if args.preset is not None:
        config.preset = args.preset
    if args.no_cache:
        config.use_cache = False
    return config


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    trained = train_models(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_round_history(trained.result.history, out / "rounds.csv")
    if trained.result.history:
        final = trained.result.history[-1]
        log.info("final round %d: val acc %.4f, train loss %.4f",
                 final.round, final.global_val_acc, final.global_train_loss)
    print(out / "rounds.csv")
    return 0


def cmd_attack(args: argparse.Namespace) -> int:
    config = _load_config(args)
    report = run_experiment(config)
    written = emit_csv([report], config.output_dir, config)
    log.info("aasr %.4f over %d clients", report.aasr,
             len(report.matrix.target_ids))
    for path in sorted(written.values()):
        print(path)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _load_config(args)
    reports = run_sweep(config)
    written = emit_csv(reports, config.output_dir, config)
    for path in sorted(written.values()):
        print(path)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    results = Path(args.out) / "results.csv"
    if not results.exists():
        raise FileNotFoundError(f"no results table at {results}")
    groups: dict[tuple, dict[str, list[float]]] = defaultdict(
        lambda: defaultdict(list))
    with open(results, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["dataset"], row["attack_kind"], row["epsilon"],
                   row["alpha"], row["iterations"])
            bucket = groups[key]
            bucket["acc"].append(float(row["acc"]))
            if row["adversary_id"] == row["target_id"]:
                bucket["self_asr"].append(float(row["asr"]))
            else:
                bucket["transfer_asr"].append(float(row["asr"]))
            bucket["aasr"].append(float(row["aasr"]))
            if row["aetr"]:
                bucket["aetr"].append(float(row["aetr"]))

    def mean(values: list[float]) -> str:
        return f"{sum(values) / len(values):.4f}" if values else "-"

    header = (f"{'dataset':<16} {'attack':<6} {'eps':>8} {'alpha':>8} "
              f"{'iters':>5} {'acc':>7} {'self':>7} {'xfer':>7} "
              f"{'aasr':>7} {'aetr':>7}")
    print(header)
    for key in sorted(groups):
        dataset, kind, eps, alpha, iters = key
        bucket = groups[key]
        print(f"{dataset:<16} {kind:<6} {eps:>8} {alpha:>8} {iters:>5} "
              f"{mean(bucket['acc']):>7} {mean(bucket['self_asr']):>7} "
              f"{mean(bucket['transfer_asr']):>7} {mean(bucket['aasr']):>7} "
              f"{mean(bucket['aetr']):>7}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        if args.verbose:
            log.exception("command failed")
        else:
            print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
