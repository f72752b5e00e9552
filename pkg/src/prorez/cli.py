"""Command-line entry point: ``prorez <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import CLASSIFIERS, PipelineConfig, default_config_text, load_config
from .errors import ProrezError, UsageError
from .pipeline import Pipeline

COMMANDS = ("synth", "tile", "folds", "pretrain", "train", "predict", "aggregate", "evaluate",
            "report", "run-all", "default-config")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file (defaults apply to absent keys)")
    common.add_argument("--run-dir", type=Path, help="override [paths] run_dir")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--threads", type=int, help="cap on worker and BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    parser = argparse.ArgumentParser(prog="prorez", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>", required=True)
    helps = {
        "synth": "generate the synthetic cohort and the proxy slides",
        "tile": "tile annotated regions and write patch manifests",
        "folds": "assign patients to folds and write the six run plans",
        "pretrain": "train the backbone on the proxy task",
        "train": "train one classifier for every run",
        "predict": "predict every patch with each trained classifier",
        "aggregate": "fit slide forests and predict test slides",
        "evaluate": "patch and slide metrics per run plus aggregates",
        "report": "tables, ROC points and figures over evaluated classifiers",
        "run-all": "every step in order",
        "default-config": "print the default config",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "train":
            p.add_argument("--stage", required=True, choices=CLASSIFIERS)
        elif name in ("predict", "aggregate", "evaluate"):
            p.add_argument("--stage", choices=CLASSIFIERS + ("all",), default="all",
                           help="default: every classifier whose upstream step has run")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.run_dir is not None:
        cfg = replace(cfg, run_dir=args.run_dir)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    return cfg.validate()


def dispatch(pipe: Pipeline, args):
    cmd = args.command
    if cmd == "train":
        return pipe.train(args.stage)
    if cmd in ("predict", "aggregate", "evaluate"):
        return getattr(pipe, cmd)(args.stage)
    if cmd == "run-all":
        return pipe.run_all()
    return getattr(pipe, cmd)()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "default-config":
            sys.stdout.write(default_config_text())
            return 0
        cfg = resolve_config(args)
        if cfg.threads < 1:
            raise UsageError("--threads must be >= 1")
        with threadpool_limits(limits=cfg.threads):
            dispatch(Pipeline(cfg), args)
    except ProrezError as exc:
        print(f"prorez {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
