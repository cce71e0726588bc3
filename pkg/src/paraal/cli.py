"""Command-line front end for the experiment pipeline.

    paraal gen-data --config exp.json
    paraal train-vs --config exp.json
    paraal run-al --config exp.json --jobs 4 --dump-scores
    paraal diagnose-entropy --config exp.json
    paraal report --output-dir results/

Every command resolves its output directory from --output-dir, then the
config's output_dir field, then the PARAAL_OUTPUT_DIR environment
variable. Validation failures exit with code 2; I/O failures with 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import harness as hn


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paraal",
        description="Active-learning experiments for multi-answer sequence "
                    "tasks: data generation, training, strategy grids, and "
                    "reporting.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, metavar="PATH",
                       help="experiment config JSON")
        p.add_argument("--output-dir", metavar="PATH",
                       help="overrides the config's output_dir "
                            "(fallback: PARAAL_OUTPUT_DIR)")

    p = sub.add_parser("gen-data", help="generate the task dataset")
    common(p)
    p.add_argument("--overwrite", action="store_true",
                   help="regenerate even if a dataset already exists")

    p = sub.add_parser("train-vs",
                       help="train and checkpoint per-seed semantic spaces")
    common(p)
    p.add_argument("--seed-list", type=_int_list, metavar="S1,S2,...",
                   help="overrides the config's seeds")
    p.add_argument("--overwrite", action="store_true",
                   help="retrain existing checkpoints")

    p = sub.add_parser("run-al", help="run the strategy x seed grid")
    common(p)
    p.add_argument("--seed-list", type=_int_list, metavar="S1,S2,...",
                   help="overrides the config's seeds")
    p.add_argument("--strategies", type=_str_list, metavar="A,B,...",
                   help="overrides the config's strategies")
    p.add_argument("--overwrite", action="store_true",
                   help="recompute cells that already have complete results "
                        "(the dataset is never regenerated here)")
    p.add_argument("--jobs", type=int, default=1, metavar="N",
                   help="grid cells to run in parallel processes")
    p.add_argument("--dump-scores", action="store_true",
                   help="also write per-pool uncertainty score CSVs")

    p = sub.add_parser("diagnose-entropy",
                       help="dump entropy/variance scores for every test item")
    common(p)
    p.add_argument("--seed", type=int,
                   help="seed to diagnose (default: first config seed)")

    p = sub.add_parser("report",
                       help="aggregate run CSVs into a mean/std table")
    common(p, config_required=False)
    return parser


def _resolve_output_dir(config_value: str | None, flag_value: str | None) -> str:
    out = flag_value or config_value or os.environ.get("PARAAL_OUTPUT_DIR")
    if not out:
        raise hn.ConfigError(
            "no output directory: pass --output-dir, set output_dir in the "
            "config, or set PARAAL_OUTPUT_DIR")
    return out


def _report(args) -> int:
    cfg = hn.load_config(args.config) if args.config else None
    out = _resolve_output_dir(cfg.output_dir if cfg else None, args.output_dir)
    records = hn.read_records(out)
    rows = hn.aggregate(records, Path(out) / "runs")
    path = hn.write_aggregate(rows, Path(out) / "aggregate.csv")
    done = sum(1 for r in records if r.complete)
    print(f"aggregated {done} runs -> {path}")
    last = max(r["iteration"] for r in rows)
    for r in rows:
        if (r["iteration"] == last and r["question_type"] == "all"
                and r["metric_name"] == "paraphrase_accuracy"):
            print(f"  {r['strategy']:<16} paraphrase_accuracy "
                  f"{r['mean']:.4f} +/- {r['std']:.4f} (n={r['n']})")
    return 0


def _dispatch(args) -> int:
    if args.command == "report":
        return _report(args)

    cfg = hn.load_config(args.config)
    if getattr(args, "seed_list", None) is not None:
        cfg = dataclasses.replace(cfg, seeds=args.seed_list)
    if getattr(args, "strategies", None) is not None:
        cfg = dataclasses.replace(cfg, strategies=args.strategies)
    cfg.validate()
    out = _resolve_output_dir(cfg.output_dir, args.output_dir)

    if args.command == "gen-data":
        Path(out).mkdir(parents=True, exist_ok=True)
        hn.write_config_echo(cfg, out)
        ds = hn.ensure_dataset(cfg, out, overwrite=args.overwrite, log=print)
        print(f"dataset ready: {len(ds.train_items)} pool / "
              f"{len(ds.test_items)} test items under {out}")
        return 0
    if args.command == "train-vs":
        Path(out).mkdir(parents=True, exist_ok=True)
        hn.write_config_echo(cfg, out)
        paths = hn.train_vs_checkpoints(cfg, out, overwrite=args.overwrite,
                                        log=print)
        print(f"{len(paths)} checkpoints under {Path(out) / 'vs'}")
        return 0
    if args.command == "run-al":
        records = hn.run_grid(cfg, out, overwrite=args.overwrite,
                              dump_scores=args.dump_scores, jobs=args.jobs,
                              log=print)
        print(f"{len(records)} runs complete under {out}")
        return 0
    if args.command == "diagnose-entropy":
        Path(out).mkdir(parents=True, exist_ok=True)
        hn.write_config_echo(cfg, out)
        path = hn.diagnose_entropy(cfg, out, seed=args.seed, log=print)
        print(f"diagnostics written to {path}")
        return 0
    raise AssertionError(f"unhandled command {args.command!r}")


def cli_main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except hn.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
