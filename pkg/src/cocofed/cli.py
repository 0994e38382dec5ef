"""Command-line entry point.

Subcommands: train (run an experiment, write metrics CSV + JSON summary),
verify (run the numerical property suite), account (print the overhead
ledger), gen-data (dump per-gNB signal batch files).

Exit codes: 0 success, 1 usage error, 2 config error, 3 property-suite
failure.  Logs go to stderr as JSON lines; stdout carries only command
output (JSON for verify/account), metrics go to files.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .aoa import partition_angles, save_batches, synthesize_batch
from .config import ConfigError, parse_config
from .protocol import (
    _TAG_DATA,
    _TAG_PARTITION,
    Experiment,
    _stream,
    account_overhead,
    make_channel,
    records_to_csv,
    summarize,
)
from .verify import run_all

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_PROPERTY = 3


class _JsonLineFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps(
            {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        )


def _setup_logging(verbose=False):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLineFormatter())
    root = logging.getLogger("cocofed")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _load_config(args):
    overrides = {
        "rounds": getattr(args, "rounds", None),
        "mode": getattr(args, "mode", None),
        "master_seed": getattr(args, "seed", None),
    }
    if args.config:
        return parse_config(args.config, overrides)
    from .config import config_from_dict

    return config_from_dict({}, overrides)


def _cmd_train(args):
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    exp = Experiment(cfg)
    records = exp.run()
    csv_text = records_to_csv(records, cfg)
    (out / "metrics.csv").write_text(csv_text)
    summary = summarize(records, cfg)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    logging.getLogger("cocofed").info(
        "wrote %s and %s", out / "metrics.csv", out / "summary.json"
    )
    return EXIT_OK


def _cmd_verify(args):
    report = run_all(fast=not args.full)
    print(json.dumps(report, indent=2))
    return EXIT_OK if report["all_passed"] else EXIT_PROPERTY


def _cmd_account(args):
    cfg = _load_config(args)
    ledger = account_overhead(cfg)
    print(json.dumps(ledger.to_dict(), indent=2))
    return EXIT_OK


def _cmd_gen_data(args):
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(cfg.K):
        support = partition_angles(
            cfg.partition,
            k,
            _stream(cfg.master_seed, _TAG_PARTITION, k),
            width_deg=cfg.noniid_sector_deg,
            support=cfg.angle_support,
        )
        rng = _stream(cfg.master_seed, _TAG_DATA, k)
        chan = make_channel(cfg, support)
        batches = []
        for _ in range(args.count):
            thetas = rng.uniform(*support, size=cfg.U)
            batches.append(synthesize_batch(chan, rng, thetas, cfg.T, gnb_id=k))
        path = out / f"gnb{k}.bin"
        save_batches(path, batches)
        logging.getLogger("cocofed").info("wrote %s (%d batches)", path, len(batches))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cocofed",
        description="Deterministic federated-learning simulator with compressed "
        "low-rank updates and superposed uplinks, on an unsupervised AoA task.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command")

    def common(p, needs_out=False):
        p.add_argument("--config", help="JSON config file (defaults used if omitted)")
        p.add_argument("--rounds", type=int, help="override number of global rounds")
        p.add_argument("--mode", choices=("cocofed", "fedavg", "perlayer"), help="override protocol mode")
        p.add_argument("--seed", type=int, help="override master seed")
        if needs_out:
            p.add_argument("--out", default="cocofed_out", help="output directory")

    p_train = sub.add_parser("train", help="run a federated experiment")
    common(p_train, needs_out=True)

    p_verify = sub.add_parser("verify", help="run the numerical property suite")
    p_verify.add_argument("--full", action="store_true", help="larger sample sizes")

    p_account = sub.add_parser("account", help="print the per-round overhead ledger")
    common(p_account)

    p_gen = sub.add_parser("gen-data", help="dump per-gNB signal batch files")
    common(p_gen, needs_out=True)
    p_gen.add_argument("--count", type=int, default=32, help="batches per gNB")

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(getattr(args, "verbose", False))
    handlers = {
        "train": _cmd_train,
        "verify": _cmd_verify,
        "account": _cmd_account,
        "gen-data": _cmd_gen_data,
    }
    if args.command not in handlers:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        logging.getLogger("cocofed").error("config error [%s] at %s: %s", exc.code, exc.key, exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
