"""``polybench`` command line."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .errors import ConfigError, PolybenchError

STAGES = ("generate", "split", "train", "evaluate", "report", "repro-paper")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file (see `config --dump-defaults`)")
    p.add_argument("--seed", type=int, help="override experiment.master_seed")
    p.add_argument("--fold-mode", choices=("grouped", "pooled"))
    p.add_argument("--difficulty", choices=("easy", "hard"))
    p.add_argument("--profile", choices=("full", "quick"))
    p.add_argument("--output-dir", metavar="DIR")
    p.add_argument("--jobs", type=int, metavar="N", help="parallel fold workers")
    p.add_argument("--force", action="store_true", help="redo work even if artifacts are up to date")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polybench", description="Synthetic polyp phantom benchmark runs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        _common(p)
        if name == "train":
            p.add_argument("--classifier", action="append", choices=("svm", "resnet_scratch", "resnet_pretrained"),
                           help="repeatable; default: every classifier in the config")
            p.add_argument("--folds", metavar="LIST", help="e.g. 0-3,7; default: the config's folds")
    p = sub.add_parser("config", help="print configuration")
    p.add_argument("--dump-defaults", action="store_true", help="print every default setting")
    p.add_argument("--profile", choices=("full", "quick"))
    p.add_argument("--config", metavar="PATH", help="print the resolved config of this file instead")
    return parser


def _overrides(args) -> dict:
    return {
        ("experiment", "master_seed"): args.seed,
        ("experiment", "fold_mode"): args.fold_mode,
        ("experiment", "difficulty"): args.difficulty,
        ("experiment", "profile"): args.profile,
        ("experiment", "output_dir"): args.output_dir,
        ("experiment", "jobs"): args.jobs,
    }


def run(args) -> int:
    from . import experiment as ex

    if args.command == "config":
        cfg = ex.load_config(args.config, {("experiment", "profile"): args.profile})
        sys.stdout.write(cfg.to_ini(with_docs=args.dump_defaults))
        return 0

    cfg = ex.load_config(args.config, _overrides(args))
    if args.command == "generate":
        print(ex.cmd_generate(cfg, args.force))
    elif args.command == "split":
        print(ex.cmd_split(cfg, args.force))
    elif args.command == "train":
        folds = ex.parse_fold_list(args.folds) if args.folds else None
        ex.cmd_train(cfg, args.classifier, folds, args.force)
    elif args.command == "evaluate":
        print(ex.cmd_evaluate(cfg))
    elif args.command == "report":
        for p in ex.cmd_report(cfg):
            print(p)
    elif args.command == "repro-paper":
        run_dir = ex.cmd_repro_paper(cfg, args.force)
        print((run_dir / "reports" / "table.csv").read_text(encoding="utf-8"), end="")
        print(run_dir)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except PolybenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
