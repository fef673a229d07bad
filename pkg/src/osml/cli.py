"""Command-line entry points: run, sweep, report, gradcheck."""

from __future__ import annotations

import argparse
import os
import sys

from . import gradcheck as gc
from . import harness as hn


def _print_overall(rows) -> None:
    for method, tag, mean, ci, ar in hn.summarize(rows):
        if tag == "overall":
            line = f"{method:<12} acc {float(mean):.4f} ± {float(ci):.4f}"
            if ar:
                line += f"  AR {float(ar):.3f}"
            print(line)


def cmd_run(args) -> int:
    cfg = hn.parse_config(args.config)
    ok, out = hn.run_experiment(cfg, out_dir=args.out, jobs=args.jobs)
    rows = hn.read_metrics(os.path.join(out, "metrics.csv"))
    _print_overall(rows)
    print(f"outputs: {out}")
    if not ok:
        print("some cells failed; see failures.txt", file=sys.stderr)
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    cfg = hn.parse_config(args.config)
    ok, out = hn.efficiency_sweep(
        cfg, sizes=args.sizes, target=args.target, out_dir=args.out, jobs=args.jobs
    )
    print(f"outputs: {out}")
    if not ok:
        print("some cells failed; see the per-size failures.txt", file=sys.stderr)
    return 0 if ok else 1


def cmd_report(args) -> int:
    metrics = os.path.join(args.csv_dir, "metrics.csv")
    rows = hn.read_metrics(metrics)
    hn.write_reports(args.csv_dir, rows)
    _print_overall(rows)
    return 0


def cmd_gradcheck(args) -> int:
    results = gc.run_gradcheck(seed=args.seed, instances=args.instances)
    print(gc.format_results(results))
    return 0 if all(r.ok for r in results) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="osml",
        description="Online structured meta-learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every (method, seed) cell of a config")
    p_run.add_argument("config")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel cells")
    p_run.add_argument("--out", default=None, help="output directory (verbatim)")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="rerun at several per-class support budgets")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--sizes", type=int, nargs="+", default=None)
    p_sweep.add_argument("--target", type=float, default=None,
                         help="accuracy defining samples-to-target")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_rep = sub.add_parser("report", help="recompute summaries from a metrics.csv directory")
    p_rep.add_argument("csv_dir")
    p_rep.set_defaults(fn=cmd_report)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of every autodiff op")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--instances", type=int, default=20)
    p_gc.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
