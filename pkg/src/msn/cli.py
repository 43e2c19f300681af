"""Command-line entry point.

Subcommands: ``fetch-data``, ``train``, ``eval``, ``verify``. Exit codes are
stable: 0 success, 1 usage or config error, 2 digest mismatch or malformed
checkpoint, 3 network failure, 4 non-finite loss, 5 failed verification.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_datasets
from .data import DatasetFormatError, DigestMismatchError, DownloadError, fetch_dataset
from .trainer import (
    TrainingDivergedError,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .verify import SUITES, run_suites

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIGEST = 2
EXIT_NETWORK = 3
EXIT_DIVERGED = 4
EXIT_VERIFY_FAILED = 5


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; our contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _default_data_dir() -> str:
    return os.environ.get("MSN_DATA_DIR", "data")


def cmd_fetch_data(args) -> int:
    url, sha256, data_dir = args.url, args.sha256, None
    if args.config:
        try:
            config = RunConfig.from_file(args.config)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        url = url or config.data.url
        sha256 = sha256 or config.data.sha256
        data_dir = config.data.data_dir
    dest = args.out or data_dir or _default_data_dir()
    try:
        status = fetch_dataset(dest, name=args.dataset, url=url, sha256=sha256)
    except (DigestMismatchError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIGEST
    except DownloadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    if status == "already-verified":
        print(f"already verified: {dest}")
    else:
        print(f"fetched and verified: {dest}")
    return EXIT_OK


def _new_run_dir() -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S") + f"-{os.getpid()}-{time.time_ns() % 1_000_000}"
    return Path("runs") / f"run-{stamp}"


def cmd_train(args) -> int:
    try:
        config = RunConfig.from_file(args.config).with_overrides(
            seed=args.seed, out_dir=args.out, loss=args.loss)
        train_config = config.to_train_config()
        train_ds, test_ds = load_datasets(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = Path(config.out_dir) if config.out_dir else _new_run_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(config.resolved_json())

    try:
        result = train(train_config, config.network, train_ds,
                       eval_dataset=test_ds, csv_path=out_dir / "metrics.csv")
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    save_checkpoint(result.state, result.opt_state,
                    [h.xi_state for h in result.state.heads],
                    out_dir / "final.ckpt", iteration=train_config.iterations)
    final_error = evaluate(result.state, test_ds)
    print(f"run_dir={out_dir}")
    print(f"test_error={final_error:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    config_path = args.config or ckpt_path.parent / "config.resolved.json"
    try:
        config = RunConfig.from_file(config_path)
        if args.dataset or args.data_dir:
            data = dataclasses.replace(
                config.data,
                dataset=args.dataset or config.data.dataset,
                data_dir=args.data_dir or config.data.data_dir)
            config = RunConfig(network=config.network, data=data,
                               train_section=config.train_section,
                               out_dir=config.out_dir)
        _, test_ds = load_datasets(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        state, _, _ = load_checkpoint(ckpt_path, config.network)
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIGEST
    print(f"test_error={evaluate(state, test_ds):.6f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suites(args.suite, seed=args.seed)
    for result in results:
        print(result.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_VERIFY_FAILED


def build_parser() -> _Parser:
    parser = _Parser(prog="msn", description="Separability-loss CNN training kit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fetch = sub.add_parser("fetch-data", help="download and verify a dataset")
    fetch.add_argument("--dataset", choices=["cifar10"], required=True)
    fetch.add_argument("--out", default=None,
                       help="destination directory (default: $MSN_DATA_DIR or ./data)")
    fetch.add_argument("--url", default=None, help="override the archive URL")
    fetch.add_argument("--sha256", default=None, help="override the pinned digest")
    fetch.add_argument("--config", default=None,
                       help="run config supplying data.url/data.sha256/data.data_dir")
    fetch.set_defaults(func=cmd_fetch_data)

    tr = sub.add_parser("train", help="run training from a JSON config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--out", default=None,
                    help="output directory (default: a fresh runs/run-* directory)")
    tr.add_argument("--loss", choices=["msl", "ce"], default=None,
                    help="'ce' disables the within-class term on the same code path")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", choices=["cifar10", "blobs"], default=None)
    ev.add_argument("--data-dir", default=None)
    ev.add_argument("--config", default=None,
                    help="run config (default: config.resolved.json next to the checkpoint)")
    ev.set_defaults(func=cmd_eval)

    ver = sub.add_parser("verify", help="run the self-check suites")
    ver.add_argument("--suite", choices=list(SUITES), default="all")
    ver.add_argument("--seed", type=int, default=0)
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
