"""Command-line surface: fit a model, predict from it, run the benchmark."""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import __version__
from .bench import DEFAULT_METHODS, BenchSpec, run_bench
from .data import (DataError, DatasetSchema, ModelFormatError,
                   atomic_write_text, expand_dummies, load_csv, load_model,
                   save_model)
from .sampler import FitConfig, fit, predict


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softbart",
        description="Bayesian sum-of-trees regression with soft (gated) splits.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit_p = sub.add_parser("fit", help="fit a model to a CSV dataset")
    fit_p.add_argument("--data", required=True, help="training CSV with header row")
    fit_p.add_argument("--target", default="y", help="target column name (default: y)")
    fit_p.add_argument("--schema", default=None,
                       help="JSON schema file; default treats every non-target column as ordinal")
    fit_p.add_argument("--trees", type=int, default=50)
    fit_p.add_argument("--sweeps", type=int, default=40)
    fit_p.add_argument("--burnin", type=int, default=15)
    fit_p.add_argument("--gate", choices=["hard", "sigmoid", "linear"], default="sigmoid")
    fit_p.add_argument("--grid-max", type=int, default=20,
                       help="largest bandwidth grid percent (grid is 0..P)")
    fit_p.add_argument("--bandwidth-selection", choices=["sample", "argmax"],
                       default="sample",
                       help="pick the gating bandwidth by grid-posterior sampling or argmax")
    fit_p.add_argument("--seed", type=int, default=0)
    fit_p.add_argument("--out", required=True, help="path for the model file")

    pred_p = sub.add_parser("predict", help="predict new rows from a saved model")
    pred_p.add_argument("--model", required=True)
    pred_p.add_argument("--data", required=True)
    pred_p.add_argument("--out", required=True, help="path for the predictions CSV")

    bench_p = sub.add_parser("bench", help="accuracy/timing benchmark on synthetic data")
    bench_p.add_argument("--noise", choices=["high", "low"], default="high")
    bench_p.add_argument("--reps", type=int, default=20)
    bench_p.add_argument("--n", type=int, default=1000)
    bench_p.add_argument("--seed", type=int, default=0)
    bench_p.add_argument("--methods", default=",".join(DEFAULT_METHODS),
                         help="comma-separated labels, e.g. hard:40,soft-linear:40")
    bench_p.add_argument("--trees", type=int, default=50)
    bench_p.add_argument("--out", default="bench.csv", help="path for the per-rep CSV")
    return parser


def _load_schema(args) -> DatasetSchema:
    if args.schema:
        schema = DatasetSchema.from_json_file(args.schema)
        if args.target != "y" and args.target != schema.target:
            raise DataError(
                f"--target {args.target!r} conflicts with schema target {schema.target!r}")
        return schema
    # infer an all-ordinal schema from the CSV header
    import csv

    with open(args.data, newline="", encoding="utf-8") as fh:
        try:
            header = [h.strip() for h in next(csv.reader(fh))]
        except StopIteration:
            raise DataError(f"{args.data}: empty file, expected a header row") from None
    if args.target not in header:
        raise DataError(f"{args.data}: target column {args.target!r} not in header")
    features = [h for h in header if h != args.target]
    return DatasetSchema.all_ordinal(features, target=args.target)


def cmd_fit(args) -> int:
    schema = _load_schema(args)
    dataset = load_csv(args.data, schema, require_target=True)
    expanded = expand_dummies(dataset)
    config = FitConfig(
        num_trees=args.trees, sweeps=args.sweeps, burn_in=args.burnin,
        gate_family=args.gate,
        grid_percents=tuple(range(args.grid_max + 1)),
        seed=args.seed,
        bandwidth_selection=args.bandwidth_selection)
    start = time.perf_counter()
    model = fit(expanded.X, expanded.y, config, is_dummy=expanded.is_dummy,
                feature_names=expanded.feature_names)
    elapsed = time.perf_counter() - start
    model.schema_doc = schema.to_dict()
    save_model(model, args.out)
    mode = " (hard mode: bandwidth grid fixed at 0)" if args.gate == "hard" else ""
    print(f"fit complete{mode}: {config.sweeps} sweeps, "
          f"{len(model.retained)} retained, "
          f"final sigma2 {model.sigma2_trace[-1]:.6g} (scaled units), "
          f"{elapsed:.2f} s")
    print(f"model written to {args.out}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    if model.schema_doc is not None:
        schema = DatasetSchema.from_dict(model.schema_doc)
    else:
        schema = DatasetSchema.all_ordinal(model.feature_names, target="__target__")
    dataset = load_csv(args.data, schema, require_target=False)
    expanded = expand_dummies(dataset)
    if list(expanded.feature_names) != list(model.feature_names):
        raise DataError(
            f"schema mismatch: model expects features {list(model.feature_names)}, "
            f"data provides {list(expanded.feature_names)}")
    preds = predict(model, expanded.X)
    lines = ["row_index,prediction"]
    lines.extend(f"{i},{p!r}" for i, p in enumerate(preds))
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {preds.size} predictions to {args.out}")
    return 0


def cmd_bench(args) -> int:
    methods = tuple(tok.strip() for tok in args.methods.split(",") if tok.strip())
    spec = BenchSpec(noise=args.noise, reps=args.reps, n=args.n,
                     seed=args.seed, methods=methods, num_trees=args.trees)
    report = run_bench(spec)
    atomic_write_text(args.out, report.to_csv_text())
    sys.stdout.write(report.summary_text())
    print(f"per-replication rows written to {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"fit": cmd_fit, "predict": cmd_predict, "bench": cmd_bench}
    try:
        return handlers[args.command](args)
    except (DataError, ModelFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
