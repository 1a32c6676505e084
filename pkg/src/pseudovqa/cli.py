"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 invalid configuration, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import container
from .pipeline import (
    ConfigError,
    RunConfig,
    RunPaths,
    StageError,
    default_run_config,
    format_matrix,
    read_json,
    run_matrix,
    stage_caption,
    stage_eval,
    stage_finetune,
    stage_gen_data,
    stage_pretrain,
    stage_score,
    stage_synth,
    stage_train_gen,
    write_json,
)

log = logging.getLogger("pseudovqa")


def _apply_set(obj: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override onto the config JSON tree."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, _, raw = assignment.partition("=")
    node = obj
    parts = key.strip().split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"--set: unknown config group {part!r} in {key!r}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"--set: unknown config field {key!r}")
    try:
        node[leaf] = json.loads(raw)
    except json.JSONDecodeError:
        node[leaf] = raw


def load_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_json(read_json(args.config))
    else:
        cfg = default_run_config()
    if getattr(args, "set", None):
        tree = cfg.to_json()
        for assignment in args.set:
            _apply_set(tree, assignment)
        cfg = RunConfig.from_json(tree)
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        stage_field = {
            "pretrain": "pretrain_steps",
            "train-gen": "gen_steps",
            "finetune": "finetune_steps",
        }.get(args.command)
        if stage_field is None:
            raise ConfigError(f"--steps is not meaningful for {args.command!r}")
        overrides[stage_field] = args.steps
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pseudovqa",
        description="Label-efficient VQA adaptation pipeline on a synthetic benchmark",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, steps: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config field, dotted paths allowed "
                            "(e.g. --set gen_steps=800 --set synth.top_p=0.8)")
        if steps:
            p.add_argument("--steps", type=int, help="training steps (overrides config)")
        return p

    add("gen-data", "generate the synthetic benchmark and vocabulary")
    add("caption", "produce teacher captions for the unlabeled visuals")
    add("pretrain", "pretrain the base model on the generic caption corpus", steps=True)
    add("score", "accumulate QA-gradient importance scores on the base checkpoint")
    add("train-gen", "train the pseudo-QA generator", steps=True)
    add("synth", "synthesize the pseudo QA dataset from the generator")
    p = add("finetune", "fine-tune the VQA model on labeled + pseudo data", steps=True)
    p.add_argument("--no-pseudo", action="store_true", help="ignore any pseudo dataset")
    p.add_argument("--full-supervision", action="store_true",
                   help="train on every training QA pair (fully supervised row)")
    p = add("eval", "evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", help="checkpoint path (default: the fine-tuned VQA model)")
    add("matrix", "run the full method/ablation matrix over the configured seeds")
    p = add("report", "print the consolidated matrix table")
    add("write-config", "write the default RunConfig JSON to --out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except (ConfigError, ValueError, OSError, json.JSONDecodeError) as exc:
        log.error("invalid configuration: %s", exc)
        return 2

    try:
        if args.command == "gen-data":
            stage_gen_data(cfg)
        elif args.command == "caption":
            stage_caption(cfg)
        elif args.command == "pretrain":
            stage_pretrain(cfg)
        elif args.command == "score":
            stage_score(cfg)
        elif args.command == "train-gen":
            stage_train_gen(cfg)
        elif args.command == "synth":
            stage_synth(cfg)
        elif args.command == "finetune":
            labeled = RunPaths(cfg.out_dir).full_labeled if args.full_supervision else None
            stage_finetune(cfg, labeled_path=labeled, use_pseudo=not args.no_pseudo)
        elif args.command == "eval":
            report = stage_eval(cfg, ckpt_path=args.checkpoint)
            print(json.dumps(report, indent=1, sort_keys=True))
        elif args.command == "matrix":
            report = run_matrix(cfg)
            print(format_matrix(report))
        elif args.command == "report":
            report = read_json(Path(cfg.out_dir) / "matrix_report.json")
            print(format_matrix(report))
        elif args.command == "write-config":
            out = Path(cfg.out_dir) / "run_config.json"
            write_json(out, cfg.to_json())
            print(out)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return 2
    except (StageError, container.ContainerError, FileNotFoundError) as exc:
        log.error("stage failed: %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
