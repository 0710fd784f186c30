"""Command-line entry point.

Subcommands mirror the pipeline stages: gen-data, train, critic, evolve,
eval, ablate, report (plus gsweep for the group-size curve).  Exit code 0 on
success; failures print one machine-parsable line to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import RunConfig, desk_config, load_config, validate_config
from .errors import GenbidError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genbid",
                                     description="offline generative auto-bidding pipeline")
    parser.add_argument("--config", type=Path, default=None, help="YAML config block")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", type=Path, default=None, help="override run directory")
    parser.add_argument("--desk", action="store_true",
                        help="start from the desk-scale profile instead of full-scale defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the offline dataset")
    sub.add_parser("train", help="supervised stage: planner, foresight, policy")
    sub.add_parser("critic", help="train and freeze the expectile critic")
    sub.add_parser("evolve", help="offline policy evolution from the frozen critic")

    p_eval = sub.add_parser("eval", help="rotation-evaluate a trained policy")
    p_eval.add_argument("--stage", default="policy_final",
                        help="checkpoint stage to evaluate (default policy_final)")
    p_eval.add_argument("--eval-seeds", type=int, nargs="+", default=[0])

    p_ablate = sub.add_parser("ablate", help="evaluate the ablation variants")
    p_ablate.add_argument("--build", action="store_true",
                          help="train any missing variant artifacts first")
    p_ablate.add_argument("--eval-seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])

    p_gsweep = sub.add_parser("gsweep", help="group-size sweep of the evolution stage")
    p_gsweep.add_argument("--groups", type=int, nargs="+", default=[2, 4, 8])
    p_gsweep.add_argument("--eval-seeds", type=int, nargs="+", default=[0, 1])

    sub.add_parser("report", help="emit the self-contained HTML report")
    return parser


def _load_cfg(args) -> RunConfig:
    base = desk_config() if args.desk else RunConfig()
    cfg = load_config(args.config, base=base) if args.config else base
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    validate_config(cfg)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = _load_cfg(args)
        run_dir = Path(cfg.out)
        from . import evaluation, pipeline

        if args.command == "gen-data":
            run = pipeline.Run(cfg)
            run.dataset()
            print(run.dir / "dataset.jsonl")
        elif args.command == "train":
            run = pipeline.Run(cfg)
            run.dataset()
            lad, policy = pipeline.train_supervised(run)
            print(lad)
            print(policy)
        elif args.command == "critic":
            run = pipeline.Run(cfg)
            run.dataset()
            print(pipeline.stage_critic(run))
        elif args.command == "evolve":
            paths = pipeline.run_pipeline(cfg)
            print(paths["policy_final"])
        elif args.command == "eval":
            out = evaluation.evaluate_to_csv(cfg, run_dir, stage=args.stage,
                                             seeds=tuple(args.eval_seeds))
            print(out)
        elif args.command == "ablate":
            if args.build:
                pipeline.build_ablation_artifacts(cfg)
            rows = evaluation.run_ablations(cfg, run_dir, seeds=tuple(args.eval_seeds))
            for row in rows:
                print(f"{row['variant']:8s} {row['score_mean']:.3f} +- {row['score_std']:.3f}")
        elif args.command == "gsweep":
            pipeline.run_group_size_sweep(cfg, run_dir, groups=tuple(args.groups))
            out = evaluation.gsweep_to_csv(cfg, run_dir, groups=tuple(args.groups),
                                           seeds=tuple(args.eval_seeds))
            print(out)
        elif args.command == "report":
            print(evaluation.emit_report(run_dir))
        return 0
    except GenbidError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": "internal", "message": f"{type(exc).__name__}: {exc}"}),
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
