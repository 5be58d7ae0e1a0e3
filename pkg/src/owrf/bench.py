"""Real-data evaluation: CSV ingestion, random three-way splits, the
replication loop comparing the five weightings on shared trees, and
report formatting."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .core import METHODS, Dataset, Forest, aggregate_predict, equal_weights
from .trees import (
    GrowConfig,
    grow_forest,
    prob_sequence_from_importance,
    variable_importance,
)
from .weighting import (
    CriterionContext,
    crf_weights_from_tpe,
    oob_errors,
    solve_one_step,
    solve_two_steps,
    wrf_weights_from_tpe,
)

BENCHMARK = "2steps"
LAMBDA_GRID = (0.5, 1.0, 2.0, 3.0, 5.0)
ESSENTIAL_BAND = (0.95, 1.05)


class DataError(ValueError):
    pass


def load_csv(path, target_column: str) -> Dataset:
    """Read a headed numeric CSV and split off ``target_column``."""
    df = pd.read_csv(path)
    if target_column not in df.columns:
        raise DataError(f"{path}: no column named {target_column!r}")
    bad_types = [c for c in df.columns if not pd.api.types.is_numeric_dtype(df[c])]
    if bad_types:
        raise DataError(f"{path}: non-numeric columns {bad_types}")
    missing = df.isna()
    if missing.any().any():
        cells = [(int(r), c) for r, c in zip(*np.nonzero(missing.to_numpy()))]
        named = [(r, df.columns[c]) for r, c in cells[:20]]
        raise DataError(f"{path}: {len(cells)} missing value(s), e.g. (row, column) {named}")
    y = df[target_column].to_numpy(dtype=float)
    Xdf = df.drop(columns=[target_column])
    if Xdf.shape[1] == 0:
        raise DataError(f"{path}: no predictor columns")
    return Dataset(Xdf.to_numpy(dtype=float), y, tuple(Xdf.columns))


def load_manifest(path):
    """Load a dataset manifest: a JSON list of {name, path, target, expected_n,
    expected_p}; relative paths resolve against the manifest's directory."""
    path = Path(path)
    entries = json.loads(path.read_text())
    if isinstance(entries, dict):
        entries = [entries]
    out = []
    for e in entries:
        csv = Path(e["path"])
        if not csv.is_absolute():
            csv = path.parent / csv
        data = load_csv(csv, e["target"])
        for key, got in (("expected_n", data.n), ("expected_p", data.p)):
            if key in e and e[key] is not None and int(e[key]) != got:
                raise DataError(f"{e['name']}: {key}={e[key]} but file has {got}")
        out.append((e["name"], data))
    return out


@dataclass(frozen=True)
class SplitPlan:
    train: np.ndarray
    test: np.ndarray
    validation: np.ndarray
    ratios: tuple
    seed: int

    @property
    def sizes(self):
        return (self.train.size, self.test.size, self.validation.size)


def split_sizes(n: int, ratios) -> tuple:
    """Largest-remainder apportionment of n rows."""
    ratios = np.asarray(ratios, dtype=float)
    if (ratios <= 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError("ratios must be positive and sum to 1")
    raw = n * ratios
    sizes = np.floor(raw).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[: n - sizes.sum()]] += 1
    return tuple(int(s) for s in sizes)


def make_split(n: int, ratios=(0.5, 0.3, 0.2), seed: int = 0) -> SplitPlan:
    sizes = split_sizes(n, ratios)
    if min(sizes) < 1:
        raise ValueError(f"split of n={n} by {tuple(ratios)} leaves an empty part {sizes}")
    perm = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return SplitPlan(np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:]), tuple(ratios), seed)


def msfe(preds, y) -> float:
    preds, y = np.asarray(preds, dtype=float), np.asarray(y, dtype=float)
    if preds.size == 0 or preds.shape != y.shape:
        raise ValueError("predictions and targets must be non-empty and equal length")
    return float(np.mean((y - preds) ** 2))


def mafe(preds, y) -> float:
    preds, y = np.asarray(preds, dtype=float), np.asarray(y, dtype=float)
    if preds.size == 0 or preds.shape != y.shape:
        raise ValueError("predictions and targets must be non-empty and equal length")
    return float(np.mean(np.abs(y - preds)))


@dataclass(frozen=True)
class BenchConfig:
    tree_kind: str = "cart"
    n_trees: int = 100
    q: int = None  # default ceil(p/3)
    n_min: int = None  # default ceil(sqrt(n_train)) for CART, 5 for SUT
    reps: int = 50
    seed: int = 0
    lambda_grid: tuple = LAMBDA_GRID
    importance_trees: int = 100
    ratios: tuple = (0.5, 0.3, 0.2)

    def grow_config(self, n_train: int, p: int, prob_seq=None) -> GrowConfig:
        base = GrowConfig.default(self.tree_kind, n_train, p, prob_seq)
        return GrowConfig(q=self.q or base.q, n_min=self.n_min or base.n_min,
                          kind=self.tree_kind, prob_seq=base.prob_seq)

    def echo(self) -> dict:
        return {"tree_kind": self.tree_kind, "n_trees": self.n_trees, "q": self.q,
                "n_min": self.n_min, "reps": self.reps, "seed": self.seed,
                "lambda_grid": list(self.lambda_grid), "importance_trees": self.importance_trees,
                "ratios": list(self.ratios)}


def replication_seed(seed: int, d: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(d)]).generate_state(1)[0])


@dataclass
class Replication:
    forest: Forest
    weights: dict
    predictions: dict
    msfe: dict
    mafe: dict
    timings: dict
    lam: float
    split: SplitPlan


def fit_weights(forest: Forest, train: Dataset, validation: Dataset = None,
                lambda_grid=LAMBDA_GRID, methods=METHODS):
    """All weightings of one forest. wRF's exponent is chosen by validation
    MSFE when ``validation`` is given (else the first grid value)."""
    ctx = CriterionContext.from_forest(forest, train)
    weights, timings, reports = {}, {}, {}
    weights["rf"] = equal_weights(forest.n_trees)
    if "2steps" in methods or "1step" in methods:
        t0 = time.perf_counter()
        two = solve_two_steps(ctx)
        timings["2steps"] = time.perf_counter() - t0
        weights["2steps"], reports["2steps"] = two.w, two
    if "1step" in methods:
        t0 = time.perf_counter()
        one = solve_one_step(ctx, two_steps=solve_two_steps(ctx))
        timings["1step"] = time.perf_counter() - t0
        weights["1step"], reports["1step"] = one.w, one
    lam = None
    if "wrf" in methods or "crf" in methods:
        tpe = oob_errors(forest, train)
        if "wrf" in methods:
            lam = lambda_grid[0]
            if validation is not None and len(lambda_grid) > 1:
                per_tree = forest.tree_predictions(validation.X)
                scores = [msfe(per_tree @ wrf_weights_from_tpe(tpe, l), validation.y)
                          for l in lambda_grid]
                lam = lambda_grid[int(np.argmin(scores))]
            weights["wrf"] = wrf_weights_from_tpe(tpe, lam)
        if "crf" in methods:
            weights["crf"] = crf_weights_from_tpe(tpe)
    return {m: weights[m] for m in methods}, timings, reports, lam


def run_replication(data: Dataset, config: BenchConfig, d: int) -> Replication:
    seed = replication_seed(config.seed, d)
    split = make_split(data.n, config.ratios, seed)
    train, test, val = data.subset(split.train), data.subset(split.test), data.subset(split.validation)
    prob_seq = None
    if config.tree_kind == "sut":
        imp_cfg = GrowConfig.default("cart", val.n, val.p)
        imp_cfg = GrowConfig(q=config.q or imp_cfg.q, n_min=imp_cfg.n_min, kind="cart")
        prob_seq = prob_sequence_from_importance(
            variable_importance(val, imp_cfg, config.importance_trees, seed + 1))
    cfg = config.grow_config(train.n, train.p, prob_seq)
    forest = grow_forest(train, cfg, config.n_trees, seed)
    weights, timings, _, lam = fit_weights(forest, train, val, config.lambda_grid)
    per_tree = forest.tree_predictions(test.X)
    preds = {m: per_tree @ w for m, w in weights.items()}
    return Replication(
        forest=forest, weights=weights, predictions=preds,
        msfe={m: msfe(p, test.y) for m, p in preds.items()},
        mafe={m: mafe(p, test.y) for m, p in preds.items()},
        timings=timings, lam=lam, split=split,
    )


def _replication_summary(args):
    data, config, d = args
    try:
        rep = run_replication(data, config, d)
    except Exception as exc:  # counted as a failed replication
        return {"d": d, "error": f"{type(exc).__name__}: {exc}"}
    return {"d": d, "msfe": rep.msfe, "mafe": rep.mafe, "timings": rep.timings, "lambda": rep.lam}


def ranks(values: dict) -> dict:
    """Rank 1 for the smallest value; ties broken by method order."""
    order = sorted(values, key=lambda m: (values[m], METHODS.index(m)))
    return {m: i + 1 for i, m in enumerate(order)}


def relative_risk(values: dict, benchmark: str = BENCHMARK) -> dict:
    """Each method's risk divided by the benchmark's, with the 'essential' flag
    set when the ratio falls outside (0.95, 1.05)."""
    base = values[benchmark]
    out = {}
    for m, v in values.items():
        if base == 0:
            out[m] = {"ratio": None, "essential": None, "undefined": True}
            continue
        r = v / base
        out[m] = {"ratio": r, "essential": not (ESSENTIAL_BAND[0] < r < ESSENTIAL_BAND[1])}
    return out


@dataclass
class EvalReport:
    dataset: str
    n: int
    p: int
    config: dict
    msfe: dict
    mafe: dict
    timings: dict
    failures: int
    errors: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)

    @property
    def ranks(self):
        return {"msfe": ranks(self.msfe), "mafe": ranks(self.mafe)}

    @property
    def relative(self):
        return {"msfe": relative_risk(self.msfe), "mafe": relative_risk(self.mafe)}

    @property
    def timing_ratio(self):
        t2, t1 = self.timings.get("2steps"), self.timings.get("1step")
        return t1 / t2 if t1 is not None and t2 else None

    def to_dict(self, include_timings: bool = True) -> dict:
        out = {
            "schema_version": 1,
            "dataset": self.dataset,
            "n": self.n,
            "p": self.p,
            "config": self.config,
            "methods": list(self.msfe),
            "msfe": self.msfe,
            "mafe": self.mafe,
            "ranks": self.ranks,
            "relative_risk": self.relative,
            "failures": self.failures,
            "errors": self.errors,
            "lambdas": self.lambdas,
        }
        if include_timings:
            out["timings_s"] = {**self.timings, "ratio_1step_over_2steps": self.timing_ratio}
        return out

    def to_json(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=True)


def run_benchmark(data: Dataset, config: BenchConfig = BenchConfig(), name: str = "data",
                  n_jobs: int = 1) -> EvalReport:
    """Average test MSFE / MAFE of the five weightings over ``config.reps``
    random splits; optimiser wall time is averaged over successful runs."""
    if config.reps < 1:
        raise ValueError("reps must be >= 1")
    jobs = [(data, config, d) for d in range(config.reps)]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            results = list(ex.map(_replication_summary, jobs))
    else:
        results = [_replication_summary(j) for j in jobs]
    ok = [r for r in results if "error" not in r]
    errors = [r for r in results if "error" in r]
    if not ok:
        raise RuntimeError(f"all {len(results)} replications failed: {errors[0]['error']}")
    mean = lambda key, m: float(np.mean([r[key][m] for r in ok]))
    methods = list(ok[0]["msfe"])
    return EvalReport(
        dataset=name, n=data.n, p=data.p, config=config.echo(),
        msfe={m: mean("msfe", m) for m in methods},
        mafe={m: mean("mafe", m) for m in methods},
        timings={m: mean("timings", m) for m in ok[0]["timings"]},
        failures=len(errors),
        errors=errors,
        lambdas=[r["lambda"] for r in ok],
    )


LABELS = {"rf": "RF", "2steps": "2steps-WRF_opt", "1step": "1step-WRF_opt", "wrf": "wRF", "crf": "CRF"}


def markdown_table(reports, metric: str = "msfe") -> str:
    """One row per dataset, method columns, rank in parentheses as a superscript."""
    methods = list(reports[0].msfe)
    head = "| Data set | " + " | ".join(LABELS.get(m, m) for m in methods) + " |"
    lines = [head, "|---" * (len(methods) + 1) + "|"]
    for r in reports:
        vals = getattr(r, metric)
        rk = r.ranks[metric]
        cells = [f"{vals[m]:.3f}<sup>({rk[m]})</sup>" for m in methods]
        lines.append(f"| {r.dataset} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def relative_table(reports, metric: str = "msfe") -> str:
    methods = list(reports[0].msfe)
    lines = ["| Data set | " + " | ".join(LABELS.get(m, m) for m in methods) + " |",
             "|---" * (len(methods) + 1) + "|"]
    for r in reports:
        rel = r.relative[metric]
        cells = []
        for m in methods:
            if rel[m].get("undefined"):
                cells.append("n/a")
            else:
                cells.append(f"{rel[m]['ratio']:.3f}{'*' if rel[m]['essential'] else ''}")
        lines.append(f"| {r.dataset} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("`*` marks an essential difference (outside 0.95 to 1.05).")
    return "\n".join(lines)


def timing_table(reports) -> str:
    lines = ["| Data set | 2steps (s) | 1step (s) | Ratio |", "|---|---|---|---|"]
    for r in reports:
        t2, t1 = r.timings.get("2steps", math.nan), r.timings.get("1step", math.nan)
        lines.append(f"| {r.dataset} | {t2:.3f} | {t1:.3f} | {t1 / t2:.3f} |")
    return "\n".join(lines)
