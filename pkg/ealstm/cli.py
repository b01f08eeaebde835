# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

"""The ``ealstm`` command line.

``ealstm <subcommand> --config <path> [--key value ...] --seed <u64> --out <dir>``
"""

from __future__ import absolute_import

import argparse
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional

from . import config as run_config
from . import harness
from .data import describe
from .exceptions import EaLstmError, StageError
from .server import serve

LOG_FORMAT = "%(levelname)s %(asctime)s %(filename)s:%(lineno)d] %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value run configuration file")
    parser.add_argument("--monitor-port", type=int, help="serve run progress over HTTP")
    for key in run_config.override_keys():
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        parser.add_argument(*flags, dest=key, metavar="VALUE", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ealstm", description="Evolutionary attention search for LSTM forecasting"
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="root log level",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    prepare = sub.add_parser("prepare", help="parse, clean and window a dataset")
    _add_run_options(prepare)

    train = sub.add_parser("train", help="train and test under a fixed attention vector")
    _add_run_options(train)
    group = train.add_mutually_exclusive_group()
    group.add_argument("--attention", help="comma-separated weights, one per time step")
    group.add_argument("--attention-file", help="attention CSV written by a previous run")

    evolve = sub.add_parser("evolve", help="search attention weights and test the best")
    _add_run_options(evolve)

    baseline = sub.add_parser("baseline", help="train a baseline without attention search")
    _add_run_options(baseline)
    baseline.add_argument(
        "--mode",
        default=harness.Mode.PLAIN_LSTM.value,
        choices=[harness.Mode.PLAIN_LSTM.value, harness.Mode.ATTENTION_LSTM.value],
    )

    evaluate = sub.add_parser("evaluate", help="test a saved model checkpoint")
    _add_run_options(evaluate)
    evaluate.add_argument("--checkpoint", required=True, help="model.ckpt of a run")

    export = sub.add_parser("export-attention", help="write a run's attention as CSV")
    export.add_argument("--run", required=True, help="run directory holding result.json")
    export.add_argument("--path", required=True, help="destination CSV")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {key: getattr(args, key, None) for key in run_config.override_keys()}


def _attention(args: argparse.Namespace) -> Any:
    if args.attention_file:
        return harness.read_attention(args.attention_file)
    if args.attention:
        return harness.parse_attention(args.attention)
    return None


def _prepare(cfg: run_config.RunConfig, args: argparse.Namespace) -> None:
    with harness.stage(harness.Stage.DATA):
        dataset = harness.prepare(cfg)
    print(json.dumps(describe(dataset), indent=2))


def _evaluate(cfg: run_config.RunConfig, args: argparse.Namespace) -> None:
    print(json.dumps(harness.evaluate_checkpoint(cfg, args.checkpoint), indent=2))


def _export(args: argparse.Namespace) -> None:
    with harness.stage(harness.Stage.REPORT):
        with open(os.path.join(args.run, harness.RESULT_FILE), encoding="utf-8") as f:
            record = json.load(f)
        harness.write_attention(record["attention"], args.path)
    logging.info("Wrote attention weights to %s", args.path)


def _job(
    cfg: run_config.RunConfig, args: argparse.Namespace
) -> Callable[[Optional[harness.Progress]], Any]:
    if args.command == "evolve":
        return lambda progress: harness.run_evolve(cfg, progress)
    if args.command == "baseline":
        return lambda progress: harness.run_baseline(cfg, args.mode, progress)
    attention = _attention(args)
    if attention is None:
        attention = [1.0] * cfg.window
        logging.info("No attention given; training with all weights at 1")
    return lambda progress: harness.run_train(cfg, attention, progress)


def _run(cfg: run_config.RunConfig, args: argparse.Namespace) -> int:
    job = _job(cfg, args)
    if args.monitor_port is None:
        report = job(None)
    else:
        progress = harness.Progress()
        app = serve(lambda: job(progress), cfg, progress, port=args.monitor_port)
        if progress.error is not None or "result" not in app["outcome"]:
            print(progress.error or "Run did not finish", file=sys.stderr)
            return 1
        report = app["outcome"]["result"]
    print(harness.render_report(report), end="")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format=LOG_FORMAT, level=args.log_level, datefmt=LOG_DATEFMT)

    try:
        if args.command == "export-attention":
            _export(args)
            return 0
        try:
            cfg = run_config.load(args.config, _overrides(args))
        except EaLstmError as e:
            raise StageError("config", e)
        if args.command == "prepare":
            _prepare(cfg, args)
            return 0
        if args.command == "evaluate":
            _evaluate(cfg, args)
            return 0
        return _run(cfg, args)
    except StageError as e:
        logging.error("Run failed: %s", e)
        print(str(e), file=sys.stderr)
        return 1
    except EaLstmError as e:
        print(f"[{args.command}] {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
