"""Command-line interface.

Subcommands: train-teacher, prune, distill, report. Exit codes:
0 success, 2 usage/config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, FormatError, NumericError
from .harness import load_config, run_distill, run_prune, run_report, \
    run_train_teacher

_HESSIAN_FLAG = {"diag": "auto", "hg": "hg"}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None,
                   help="run a single seed instead of the config's list")
    p.add_argument("--out-dir", default=None, help="override config out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lnpt",
        description="label-free prune-then-distill experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="supervised teacher training")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("prune", help="score and mask students at initialization")
    _add_common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint path")
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--criterion", default=None)
    p.add_argument("--mode", default=None, choices=["unstructured", "channel"])
    p.add_argument("--score-sampling", default=None,
                   choices=["balanced-true", "balanced-pseudo", "uniform"])
    p.add_argument("--lnpt-hessian", default=None, choices=["diag", "hg"])

    p = sub.add_parser("distill", help="train pruned students against the teacher")
    _add_common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint path")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--temp", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--mode", default=None,
                   choices=["lnpt", "classical_kd", "true_label", "oh_only", "fm_only"])

    p = sub.add_parser("report", help="merge run directories into comparison outputs")
    p.add_argument("run_dirs", nargs="+", help="distill output directories")
    p.add_argument("--out", default=None, help="merged long-format CSV path")
    p.add_argument("--include-reference", action="store_true",
                   help="append the bundled full-scale reference rows")
    p.add_argument("--plots", action="store_true",
                   help="write static plot images next to --out")
    return parser


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["seeds"] = [args.seed]
    if getattr(args, "out_dir", None):
        cfg["out_dir"] = args.out_dir
    if getattr(args, "epochs", None) is not None:
        section = "teacher" if args.command == "train-teacher" else "distill"
        cfg[section]["epochs"] = args.epochs
    for key, dest in (("ratio", "ratio"), ("criterion", "criterion")):
        val = getattr(args, key, None)
        if val is not None:
            cfg["prune"][dest] = val
    if getattr(args, "mode", None) is not None:
        section = "prune" if args.command == "prune" else "distill"
        cfg[section]["mode"] = args.mode
    if getattr(args, "score_sampling", None) is not None:
        cfg["prune"]["score_sampling"] = args.score_sampling
    if getattr(args, "lnpt_hessian", None) is not None:
        cfg["prune"]["hessian_mode"] = _HESSIAN_FLAG[args.lnpt_hessian]
    if getattr(args, "alpha", None) is not None:
        cfg["distill"]["alpha"] = args.alpha
    if getattr(args, "temp", None) is not None:
        cfg["distill"]["temp"] = args.temp
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            table, _ = run_report(args.run_dirs, out_path=args.out,
                                  include_reference=args.include_reference,
                                  plots=args.plots)
            print(table)
            return 0
        cfg = _apply_overrides(load_config(args.config), args)
        from .harness import validate_config
        cfg = validate_config(cfg)
        if args.command == "train-teacher":
            path = run_train_teacher(cfg)
            print(f"teacher checkpoint: {path}")
        elif args.command == "prune":
            for path in run_prune(cfg, args.teacher):
                print(f"pruned student: {path}")
        elif args.command == "distill":
            summary = run_distill(cfg, args.teacher)
            acc = summary["final_accuracy"]
            print(f"final accuracy: {acc['mean']:.4f} +- {acc['std']:.4f} "
                  f"over {len(summary['seeds'])} seed(s)")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
