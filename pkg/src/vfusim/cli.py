"""Command-line entry point: train / unlearn / retrain / certify / sweep.

Every subcommand takes --config <json> plus a few overrides; results land in
the configured output directory as JSON-lines, ledger CSV, plot-data CSV and
PNG figures. Exit code 0 on success, 1 with a structured JSON error on
stderr otherwise.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiments import ExperimentConfig, run_experiment, sweep


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--seed", type=int, help="override training seed")
    parser.add_argument("--max-epochs", type=int, help="override unlearning epoch cap")
    parser.add_argument("--mode", choices=["sync", "async", "retrain", "vfulr"],
                        help="override unlearning mode")
    parser.add_argument("--online-fraction", type=float,
                        help="override async online fraction")
    parser.add_argument("--out", help="override output directory")
    parser.add_argument("--no-figures", action="store_true",
                        help="skip rendering PNG figures")


def _load_config(args: argparse.Namespace, forced_mode: str | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    if forced_mode is not None:
        cfg.mode = forced_mode
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    if args.seed is not None:
        cfg.training = {**cfg.training, "seed": args.seed}
    if args.max_epochs is not None:
        cfg.unlearning = {**cfg.unlearning, "max_epochs": args.max_epochs}
    if args.online_fraction is not None:
        cfg.schedule = {**(cfg.schedule or {}), "online_fraction": args.online_fraction}
        cfg.schedule.pop("online_count", None)
    if args.out:
        cfg.output = {**cfg.output, "dir": args.out}
    if args.no_figures:
        cfg.output = {**cfg.output, "figures": False}
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="vfusim",
        description="vertical federated learning with certified unlearning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the federation only")
    p_unlearn = sub.add_parser("unlearn", help="run the configured unlearning mode")
    p_retrain = sub.add_parser("retrain", help="retrain from scratch on corrected data")
    p_certify = sub.add_parser("certify", help="calibrated-noise run plus certification report")
    p_sweep = sub.add_parser("sweep", help="run a sweep over an axis")
    for p in (p_train, p_unlearn, p_retrain, p_certify, p_sweep):
        _add_common(p)
    p_sweep.add_argument("--axis", required=True,
                         choices=["online_count", "removal_fraction"])
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated axis values")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    try:
        if args.command == "train":
            cfg = _load_config(args, forced_mode="train_only")
            record = run_experiment(cfg)
        elif args.command == "unlearn":
            cfg = _load_config(args)
            if cfg.mode == "train_only":
                cfg.mode = "sync"
            record = run_experiment(cfg)
        elif args.command == "retrain":
            cfg = _load_config(args, forced_mode="retrain")
            record = run_experiment(cfg)
        elif args.command == "certify":
            cfg = _load_config(args)
            if cfg.certification is None:
                raise ValueError("certify needs a 'certification' config block")
            if cfg.mode not in ("sync", "async"):
                cfg.mode = "sync"
            record = run_experiment(cfg)
        elif args.command == "sweep":
            cfg = _load_config(args)
            values = [float(v) for v in args.values.split(",") if v.strip()]
            records = sweep(cfg, args.axis, values)
            for r in records:
                print(json.dumps(r.to_dict()))
            return 0
        else:  # pragma: no cover
            parser.error(f"unknown command {args.command}")
        print(json.dumps(record.to_dict()))
        return 0
    except Exception as exc:  # structured failure for scripting
        logging.getLogger(__name__).debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
