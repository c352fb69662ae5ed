"""Command line driver for the hole and cavity benchmarks."""

from __future__ import annotations

import argparse
import json
import sys

from .elasticity import BenchmarkConfig, ConvergenceError, run_benchmark


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description=__doc__)
    parser.add_argument("--case", choices=("hole", "cavity"), default="hole")
    parser.add_argument("--degree", type=int, default=2)
    parser.add_argument("--nel", type=int, default=10)
    parser.add_argument("--strategy", choices=("element", "row-individual", "row-global"), default="row-global")
    parser.add_argument("--hb", type=int, default=3, help="box width of the global placement")
    parser.add_argument("--cut-depth", type=int, default=None, help="subdivision depth of cut elements")
    parser.add_argument("--cut-order", type=int, default=None, help="Gauss order on cut sub-cells (default p + 1)")
    parser.add_argument("--solver", choices=("pcg", "direct"), default="pcg")
    parser.add_argument("--repeat", type=int, default=3, help="assembly repetitions averaged in the timings")
    parser.add_argument("--out", default=None, help="JSON report path (stdout if omitted)")
    parser.add_argument("--export-matrix", default=None, help="MatrixMarket file of the background matrix")
    parser.add_argument("--csv", default=None, help="CSV table of FLOPs and timings per region")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = BenchmarkConfig(
            benchmark=args.case,
            degree=args.degree,
            n_el=args.nel,
            strategy=args.strategy,
            h_b=args.hb,
            cut_depth=args.cut_depth,
            cut_order=args.cut_order,
            solver=args.solver,
            repeat=args.repeat,
            out=args.out,
            csv=args.csv,
            export_matrix=args.export_matrix,
        )
    except ValueError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2
    try:
        report, _, _ = run_benchmark(config)
    except ConvergenceError as exc:
        print(f"bench: {exc}; residual history: {exc.residuals[-5:]}", file=sys.stderr)
        return 1
    if not args.out:
        print(json.dumps(report.to_json(), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
