"""Command line entry point.

    mmpt train --config exp.json --out runs/full [--seed 1] [--checkpoint runs/full/checkpoint]
    mmpt eval --checkpoint runs/full/checkpoint --out runs/full/eval [--dataset data/test]
    mmpt eval --score-table scores.json --out eval/ [--space space.json]
    mmpt ablation --config exp.json --out runs/ablation
    mmpt sweep --preset ctx --out runs/sweep_ctx [--config exp.json]
    mmpt dataset-gen --config exp.json --out data/

Exit codes: 0 success, 2 invalid configuration, 1 any other error.
Set MMPT_THREADS to cap the number of torch threads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import torch

from .config import ConfigError, ExperimentConfig, load_config
from .experiment import SWEEP_PRESETS, apply_overrides, cmd_ablation, cmd_dataset_gen, cmd_eval, cmd_sweep, cmd_train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmpt", description="Multi-modal prompt tuning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the experiment seed")
        p.add_argument("--steps", type=int, default=None, help="override training.steps")

    p = sub.add_parser("train", help="train one configuration")
    common(p)
    p.add_argument("--checkpoint", help="resume from this checkpoint directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint or a bare score table")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--score-table")
    p.add_argument("--dataset", help="exported dataset split directory")
    p.add_argument("--space", help="space file for score tables without an embedded space")
    p.add_argument("--config", help="expected experiment config; its hash must match the checkpoint")
    p.add_argument("--force", action="store_true", help="load despite a config hash mismatch")

    p = sub.add_parser("ablation", help="train the four prompt variants")
    common(p)

    p = sub.add_parser("sweep", help="hyperparameter sweep over one prompt axis")
    common(p, config_required=False)
    p.add_argument("--preset", required=True, choices=sorted(SWEEP_PRESETS))

    p = sub.add_parser("dataset-gen", help="render and export the synthetic splits")
    common(p, config_required=False)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return apply_overrides(cfg, seed=args.seed, steps=getattr(args, "steps", None))


def run(args) -> int:
    if args.verb == "train":
        cmd_train(_config(args), args.out, resume=args.checkpoint)
    elif args.verb == "eval":
        if (args.checkpoint is None) == (args.score_table is None):
            raise ConfigError("eval needs exactly one of --checkpoint or --score-table")
        cfg = load_config(args.config) if args.config else None
        s = cmd_eval(args.out, checkpoint=args.checkpoint, dataset_dir=args.dataset, score_table=args.score_table,
                     space_file=args.space, config=cfg, force=args.force)
        print(f"S={s.S:.2f} U={s.U:.2f} HM={s.HM:.2f} AUC={s.AUC:.2f}")
    elif args.verb == "ablation":
        print(cmd_ablation(_config(args), args.out))
    elif args.verb == "sweep":
        base = _config(args) if args.config or args.seed is not None or args.steps is not None else None
        print(cmd_sweep(args.preset, args.out, base))
    elif args.verb == "dataset-gen":
        print(cmd_dataset_gen(_config(args), args.out))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("MMPT_THREADS")
    if threads:
        torch.set_num_threads(max(int(threads), 1))
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
