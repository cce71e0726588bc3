"""Command-line entry point: paraal-plot."""

from __future__ import annotations

import argparse
import glob
import sys

from .figures import KINDS, FigureSpec, SchemaError, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paraal-plot",
        description="Render figures from paraal experiment CSVs "
                    "(PNG and SVG side by side).")
    parser.add_argument("--kind", required=True, choices=KINDS,
                        help="figure to render")
    parser.add_argument("--input", required=True,
                        help="glob over input CSV files, e.g. "
                             "'out/runs/*.csv' (quote it)")
    parser.add_argument("--out", required=True,
                        help="output path; extension is replaced by "
                             ".png and .svg")
    parser.add_argument("--metric", default="paraphrase_accuracy",
                        help="metric_name to plot where applicable "
                             "(default: %(default)s)")
    parser.add_argument("--strategies", default=None,
                        help="comma-separated strategy filter; "
                             "default: all present")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    paths = sorted(glob.glob(args.input, recursive=True))
    if not paths:
        print(f"paraal-plot: no files match {args.input!r}", file=sys.stderr)
        return 2
    strategies = None
    if args.strategies:
        strategies = [s.strip() for s in args.strategies.split(",")
                      if s.strip()]
    spec = FigureSpec(inputs=paths, kind=args.kind, out=args.out,
                      metric=args.metric, strategies=strategies)
    try:
        written = render(spec)
    except (SchemaError, ValueError) as exc:
        print(f"paraal-plot: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
