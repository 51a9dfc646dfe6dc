"""Command-line entry point.

Verbs: run-grid, run-sweep, compare-supervised, report. An experiment is
described by a single JSON config file (see ExperimentSpec); every flag
below overrides the corresponding config field, and the fully resolved
config is written into the output directory before any training starts.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import bench
from .bench import DatasetSpec, ExperimentSpec, SweepSpec


def _add_common(p):
    p.add_argument("--config", help="experiment config file (JSON)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dataset-kind", choices=["synthetic", "fer-csv", "image-dir"])
    p.add_argument("--dataset-path", help="path for fer-csv / image-dir datasets")
    p.add_argument("--seeds", help="comma-separated seed list, e.g. 0,1,2")
    p.add_argument("--parallel", type=int, default=1, help="worker processes for grid cells")
    p.add_argument("--iterations", type=int, help="override training iterations")


def build_parser():
    parser = argparse.ArgumentParser(prog="ssllab", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("run-grid", help="train a method x label-budget grid")
    _add_common(g)
    g.add_argument("--methods", help="comma-separated method list")
    g.add_argument("--n-labels", help="comma-separated labels-per-class budgets, e.g. 10,25,100,250")

    s = sub.add_parser("run-sweep", help="hyper-parameter sensitivity sweep")
    _add_common(s)
    s.add_argument("--param", help="one of: " + ", ".join(sorted(bench.SWEEPABLE)))
    s.add_argument("--values", help="comma-separated sweep values")
    s.add_argument("--method", help="method being swept")
    s.add_argument("--sweep-n-labels", type=int, help="labels per class for the sweep")

    c = sub.add_parser("compare-supervised", help="full vs partial supervision vs best SSL")
    _add_common(c)
    c.add_argument("--n-labels", type=int, help="labels per class for the partial columns")
    c.add_argument("--ssl-method", help="method for the semi-supervised column")

    r = sub.add_parser("report", help="render saved results from an output directory")
    r.add_argument("--out", required=True)
    return parser


def _parse_list(text, cast):
    return tuple(cast(v) for v in text.split(",") if v != "")


def _spec_from_args(args) -> ExperimentSpec:
    spec = ExperimentSpec.load(args.config) if args.config else ExperimentSpec()
    if args.out:
        spec.output_dir = args.out
    if args.dataset_kind or args.dataset_path:
        ds = spec.dataset.to_dict()
        if args.dataset_kind:
            ds["kind"] = args.dataset_kind
        if args.dataset_path:
            ds["path"] = args.dataset_path
        spec.dataset = DatasetSpec.from_dict(ds)
    if args.seeds:
        spec.seeds = _parse_list(args.seeds, int)
    if args.iterations:
        spec.train = dataclasses.replace(spec.train, total_iterations=args.iterations)
    if getattr(args, "methods", None):
        spec.methods = _parse_list(args.methods, str)
    if getattr(args, "n_labels", None) and args.verb == "run-grid":
        spec.n_labels = _parse_list(args.n_labels, int)
    if getattr(args, "ssl_method", None):
        spec.ssl_method = args.ssl_method
    if args.verb == "run-sweep":
        base = spec.sweep.to_dict() if spec.sweep else {"parameter": "p_cutoff", "values": [0.5, 0.95]}
        if args.param:
            base["parameter"] = args.param
        if args.values:
            base["values"] = list(_parse_list(args.values, float))
        if args.method:
            base["method"] = args.method
        if args.sweep_n_labels:
            base["n_labels"] = args.sweep_n_labels
        spec.sweep = SweepSpec.from_dict(base)
    spec.__post_init__()  # revalidate after overrides
    return spec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "report":
        print(bench.report(args.out))
        return 0
    spec = _spec_from_args(args)
    if args.verb == "run-grid":
        table = bench.run_grid(spec, parallel=args.parallel)
        print(table.render_text())
        failures = [r for r in table.records if r.status != "ok"]
        if failures:
            print(f"{len(failures)} cell(s) failed; see their result.json files", file=sys.stderr)
            return 1
        return 0
    if args.verb == "run-sweep":
        rows = bench.run_sensitivity(spec, parallel=args.parallel)
        for row in rows:
            mean = "failed" if row["mean_accuracy"] is None else f"{row['mean_accuracy']:.4f}"
            print(f"{spec.sweep.parameter}={row['value']}: {mean}")
        return 0
    if args.verb == "compare-supervised":
        comparison = bench.compare_supervised(spec, n_labels=args.n_labels, parallel=args.parallel)
        for col in comparison["columns"]:
            mean = "failed" if col["mean_accuracy"] is None else f"{col['mean_accuracy']:.4f}"
            print(f"{col['column']} ({col['method']}, n={col['n_labels']}): {mean}")
        return 0
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
