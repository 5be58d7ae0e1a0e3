"""Command-line front end: ``owrf fit | predict | bench | simulate``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, oracle
from .core import METHODS, BootstrapSample, Forest, RegressionTree, aggregate_predict
from .trees import GrowConfig, grow_forest, prob_sequence_from_importance, variable_importance
from .weighting import CriterionContext, criterion_c_prime

SCHEMA_VERSION = 1


def _int_list(s):
    return [int(x) for x in s.split(",") if x]


def _float_list(s):
    return tuple(float(x) for x in s.split(",") if x)


def _positive(kind):
    def parse(s):
        v = kind(s)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"expected a positive value, got {s}")
        return v
    return parse


def _common(p):
    p.add_argument("--trees", type=_positive(int), default=100, help="number of trees M_n")
    p.add_argument("--q", type=_positive(int), default=None, help="features tried per split (default ceil(p/3))")
    p.add_argument("--min-leaf", type=_positive(int), default=None,
                   help="n_min (default ceil(sqrt(n)) for cart, 5 for sut)")
    p.add_argument("--tree-kind", choices=("cart", "sut"), default="cart")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive(int), default=os.cpu_count() or 1)
    p.add_argument("--out", type=Path, default=None, help="output file (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="owrf", description="Optimally weighted regression forests")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="grow a forest and choose tree weights")
    fit.add_argument("--data", type=Path, required=True)
    fit.add_argument("--target", required=True)
    fit.add_argument("--method", choices=METHODS, default="2steps")
    fit.add_argument("--lambda", dest="lam", type=_positive(float), default=1.0, help="wRF exponent")
    fit.add_argument("--prob-seq", choices=("importance", "uniform"), default="importance",
                     help="SUT feature probabilities")
    _common(fit)

    pred = sub.add_parser("predict", help="predict with a fitted model")
    pred.add_argument("--model", type=Path, required=True)
    pred.add_argument("--data", type=Path, required=True)
    pred.add_argument("--out", type=Path, default=None)

    b = sub.add_parser("bench", help="compare the five weightings over random splits")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", type=Path)
    src.add_argument("--data", type=Path)
    b.add_argument("--target", help="target column (with --data)")
    b.add_argument("--name", default=None, help="dataset label (with --data)")
    b.add_argument("--reps", type=_positive(int), default=50)
    b.add_argument("--lambda-grid", type=_float_list, default=bench.LAMBDA_GRID)
    b.add_argument("--format", choices=("json", "md"), default="json")
    _common(b)

    sim = sub.add_parser("simulate", help="loss-ratio study on synthetic data")
    sim.add_argument("--n-grid", type=_int_list, default=[200, 500, 1000])
    sim.add_argument("--reps", type=_positive(int), default=20)
    sim.add_argument("--p", type=_positive(int), default=5)
    sim.add_argument("--mu", choices=oracle.MEAN_FUNCTIONS, default="linear")
    sim.add_argument("--noise", choices=("homo", "hetero"), default="homo")
    sim.add_argument("--sigma", type=_positive(float), default=1.0)
    sim.add_argument("--no-one-step", action="store_true", help="skip the cubic criterion")
    sim.add_argument("--risk", action="store_true", help="also report estimated risk ratios")
    sim.add_argument("--format", choices=("json", "md"), default="json")
    _common(sim)
    sim.set_defaults(trees=50, tree_kind="sut", min_leaf=5)
    return parser


def _emit(text: str, out):
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")


def model_to_dict(forest: Forest, names, target, report=None, criteria=None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "method": forest.method,
        "config": forest.meta,
        "feature_names": list(names),
        "target": target,
        "weights": [float(w) for w in forest.weights],
        "solve_report": report.to_dict() if report is not None else None,
        "criteria": criteria or {},
        "trees": [t.to_dict() for t in forest.trees],
        "bootstrap_counts": [s.counts.tolist() for s in forest.samples],
    }


def model_from_dict(d: dict) -> Forest:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema {d.get('schema_version')}")
    trees = [RegressionTree.from_dict(t) for t in d["trees"]]
    samples = [BootstrapSample(np.array(c)) for c in d["bootstrap_counts"]]
    return Forest(trees, samples, np.array(d["weights"]), d["method"], None, d.get("config", {}))


def cmd_fit(args) -> int:
    data = bench.load_csv(args.data, args.target)
    prob_seq = None
    if args.tree_kind == "sut" and args.prob_seq == "importance":
        imp_cfg = GrowConfig.default("cart", data.n, data.p)
        prob_seq = prob_sequence_from_importance(variable_importance(data, imp_cfg, 100, args.seed + 1))
    base = GrowConfig.default(args.tree_kind, data.n, data.p, prob_seq)
    cfg = GrowConfig(q=args.q or base.q, n_min=args.min_leaf or base.n_min,
                     kind=args.tree_kind, prob_seq=base.prob_seq)
    forest = grow_forest(data, cfg, args.trees, args.seed, n_jobs=args.threads)
    weights, _, reports, lam = bench.fit_weights(forest, data, None, (args.lam,),
                                                 methods=("rf", args.method))
    fitted = forest.with_weights(weights[args.method], args.method)
    if lam is not None:
        fitted.meta["lambda"] = lam
    if cfg.prob_seq is not None:
        fitted.meta["prob_seq"] = [float(x) for x in cfg.prob_seq]
    ctx = CriterionContext.from_forest(forest, data)
    criteria = {"c_prime": criterion_c_prime(ctx, fitted.weights)}
    doc = model_to_dict(fitted, data.names, args.target, reports.get(args.method), criteria)
    _emit(json.dumps(doc), args.out)
    return 0


def cmd_predict(args) -> int:
    model = json.loads(Path(args.model).read_text())
    forest = model_from_dict(model)
    import pandas as pd

    df = pd.read_csv(args.data)
    names = model["feature_names"]
    missing = [c for c in names if c not in df.columns]
    if missing:
        raise bench.DataError(f"{args.data}: missing feature columns {missing}")
    X = df[names].to_numpy(dtype=float)
    if not np.isfinite(X).all():
        raise bench.DataError(f"{args.data}: missing or non-numeric feature values")
    preds = aggregate_predict(forest, X)
    out = {"schema_version": SCHEMA_VERSION, "method": forest.method,
           "predictions": [float(v) for v in preds]}
    target = model.get("target")
    if target in df.columns:
        y = df[target].to_numpy(dtype=float)
        out["msfe"], out["mafe"] = bench.msfe(preds, y), bench.mafe(preds, y)
    _emit(json.dumps(out), args.out)
    return 0


def cmd_bench(args) -> int:
    if args.manifest is not None:
        datasets = bench.load_manifest(args.manifest)
    else:
        if not args.target:
            raise bench.DataError("--target is required with --data")
        datasets = [(args.name or Path(args.data).stem, bench.load_csv(args.data, args.target))]
    config = bench.BenchConfig(tree_kind=args.tree_kind, n_trees=args.trees, q=args.q,
                               n_min=args.min_leaf, reps=args.reps, seed=args.seed,
                               lambda_grid=tuple(args.lambda_grid))
    reports = [bench.run_benchmark(data, config, name, n_jobs=args.threads) for name, data in datasets]
    if args.format == "md":
        text = "\n\n".join([
            "### MSFE\n\n" + bench.markdown_table(reports, "msfe"),
            "### MAFE\n\n" + bench.markdown_table(reports, "mafe"),
            "### Relative MSFE (vs 2steps-WRF_opt)\n\n" + bench.relative_table(reports, "msfe"),
            "### Relative MAFE (vs 2steps-WRF_opt)\n\n" + bench.relative_table(reports, "mafe"),
            "### Optimiser time per run\n\n" + bench.timing_table(reports),
        ])
    else:
        text = json.dumps({"schema_version": SCHEMA_VERSION,
                           "reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True)
    _emit(text, args.out)
    return 0 if all(r.failures == 0 for r in reports) else 1


def cmd_simulate(args) -> int:
    report = oracle.optimality_ratio_study(
        args.n_grid, n_trees=args.trees, tree_kind=args.tree_kind, reps=args.reps, p=args.p,
        n_min=args.min_leaf, mu_fn=args.mu, noise=args.noise, sigma=args.sigma, seed=args.seed,
        with_one_step=not args.no_one_step, with_risk=args.risk)
    _emit(report.to_text() if args.format == "md" else report.to_json(), args.out)
    return 0


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "bench": cmd_bench, "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"owrf {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
