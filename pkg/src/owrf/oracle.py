"""Synthetic ground truth: data with known conditional mean and noise
variance, exact squared loss / conditional risk of a weighted forest, the
infeasible best weights, and the loss-ratio study."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import Dataset, check_simplex, equal_weights
from .simplex import solve_quadratic_simplex
from .trees import GrowConfig, grow_forest
from .weighting import CriterionContext, solve_one_step, solve_two_steps

MEAN_FUNCTIONS = ("linear", "friedman", "step")


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    p: int
    mu_fn: str = "linear"
    noise: str = "homo"  # "homo" or "hetero"
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be positive")
        if self.mu_fn not in MEAN_FUNCTIONS:
            raise ValueError(f"mu_fn must be one of {MEAN_FUNCTIONS}")
        if self.noise not in ("homo", "hetero"):
            raise ValueError("noise must be 'homo' or 'hetero'")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def mean_function(name: str, X: np.ndarray) -> np.ndarray:
    """Conditional means on [0, 1]^p.

    linear:   sum_j beta_j x_j with beta_j = 1 + j (j = 0..p-1)
    friedman: 10 sin(pi x0 x1) + 20 (x2 - 0.5)^2 + 10 x3 + 5 x4 (missing terms dropped)
    step:     3 [x0 > 0.5] + 2 [x1 > 0.3] - 2 [x0 > 0.8]
    """
    n, p = X.shape
    col = lambda j: X[:, j] if j < p else np.zeros(n)
    if name == "linear":
        return X @ (1.0 + np.arange(p))
    if name == "friedman":
        return (10 * np.sin(np.pi * col(0) * (col(1) if p > 1 else 1.0))
                + 20 * (col(2) - 0.5) ** 2 * (p > 2) + 10 * col(3) + 5 * col(4))
    if name == "step":
        return 3.0 * (col(0) > 0.5) + 2.0 * (col(1) > 0.3) * (p > 1) - 2.0 * (col(0) > 0.8)
    raise ValueError(f"unknown mean function {name!r}")


def generate(spec: SyntheticSpec):
    """Return ``(Dataset, mu, sigma2)`` with Gaussian noise of variance ``sigma2``."""
    rng = np.random.default_rng(spec.seed)
    X = rng.uniform(0.0, 1.0, size=(spec.n, spec.p))
    mu = mean_function(spec.mu_fn, X)
    if spec.noise == "homo":
        sd = np.full(spec.n, spec.sigma)
    else:
        sd = spec.sigma * (1.0 + np.abs(X[:, 0]))
    y = mu + sd * rng.standard_normal(spec.n)
    return Dataset(X, y), mu, sd ** 2


def _fits(hats, y) -> np.ndarray:
    return np.column_stack([h.dot(y) for h in hats])


def _weighted_hat(hats, w) -> sp.csr_matrix:
    w = check_simplex(w)
    P = hats[0].matrix * w[0]
    for h, wm in zip(hats[1:], w[1:]):
        P = P + h.matrix * wm
    return P.tocsr()


def loss_Ln(hats, w, y, mu) -> float:
    """Squared loss |P(w) y - mu|^2 of the weighted fit against the true mean."""
    w = check_simplex(w)
    diff = _fits(hats, y) @ w - np.asarray(mu, dtype=float)
    return float(diff @ diff)


def risk_Rn(hats, w, mu, sigma2) -> float:
    """E[L_n | X, trees] = |(P(w) - I) mu|^2 + sum_ij P(w)_ij^2 sigma2_j, for
    hat matrices that do not depend on the noise."""
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), mu.shape)
    P = _weighted_hat(hats, w)
    bias = P @ mu - mu
    var = float((P.multiply(P) @ sigma2).sum())
    return float(bias @ bias) + var


def infeasible_best(hats, y, mu):
    """Minimiser over the simplex of the (unobservable) loss L_n(w)."""
    A = _fits(hats, y) - np.asarray(mu, dtype=float)[:, None]
    rep = solve_quadratic_simplex(A.T @ A, np.zeros(A.shape[1]))
    w = rep.w
    return w, loss_Ln(hats, w, y, mu)


def risk_quadratic(hats, mu, sigma2):
    """(G, b) with R_n(w) = w'Gw on the simplex (b = 0)."""
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), mu.shape)
    B = np.column_stack([h.dot(mu) - mu for h in hats])
    G = B.T @ B
    M = len(hats)
    S = np.empty((M, M))
    scaled = [h.matrix @ sp.diags(sigma2) for h in hats]
    for a in range(M):
        for c in range(a, M):
            S[a, c] = S[c, a] = scaled[a].multiply(hats[c].matrix).sum()
    return G + S, np.zeros(M)


def infeasible_best_risk(hats, mu, sigma2):
    G, b = risk_quadratic(hats, mu, sigma2)
    rep = solve_quadratic_simplex(G, b)
    return rep.w, rep.objective


@dataclass
class RatioReport:
    n_values: list
    n_trees: int
    tree_kind: str
    reps: int
    config: dict
    ratios: dict = field(default_factory=dict)  # method -> list (per n) of lists (per rep)
    risk_ratios: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)

    def summary(self, method: str = "2steps", which: str = "loss"):
        src = self.ratios if which == "loss" else self.risk_ratios
        rows = []
        for n, vals in zip(self.n_values, src[method]):
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            rows.append({"n": n, "median": float(med), "iqr": float(q3 - q1),
                         "min": float(np.min(vals)), "max": float(np.max(vals))})
        return rows

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "n_values": list(self.n_values),
            "n_trees": self.n_trees,
            "tree_kind": self.tree_kind,
            "reps": self.reps,
            "config": self.config,
            "loss_ratios": self.ratios,
            "estimated_risk_ratios": self.risk_ratios,
            "summary": {m: self.summary(m) for m in self.ratios},
            "risk_summary": {m: self.summary(m, "risk") for m in self.risk_ratios},
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"loss ratio L_n(w)/inf L_n  ({self.tree_kind}, M={self.n_trees}, reps={self.reps})",
                 f"{'n':>7} {'method':>8} {'median':>9} {'IQR':>9} {'min':>9} {'max':>9}"]
        for m in self.ratios:
            for row in self.summary(m):
                lines.append(f"{row['n']:>7} {m:>8} {row['median']:>9.4f} {row['iqr']:>9.4f} "
                             f"{row['min']:>9.4f} {row['max']:>9.4f}")
        lines.append("")
        lines.append(f"{'n':>7} {'min leaf':>9} {'max P_ii':>9} {'sqrt(n)/min leaf':>17}")
        for d in self.diagnostics:
            lines.append(f"{d['n']:>7} {d['min_leaf_size']:>9} {d['max_hat_diag']:>9.4f} "
                         f"{d['sqrt_n_over_min_leaf']:>17.4f}")
        return "\n".join(lines)


def forest_diagnostics(forest) -> dict:
    min_leaf = min(leaf.size for t in forest.trees for leaf in t.leaves)
    max_diag = max(float(h.diag.max()) for h in forest.hats)
    return {"min_leaf_size": int(min_leaf), "max_hat_diag": max_diag}


def ratio_replication(n, p, n_trees, tree_kind, n_min, mu_fn, noise, sigma, seed,
                      with_one_step=True, with_risk=True):
    data, mu, sigma2 = generate(SyntheticSpec(n, p, mu_fn, noise, sigma, seed))
    if tree_kind == "sut":
        cfg = GrowConfig(q=max(1, math.ceil(p / 3)), n_min=n_min, kind="sut",
                         prob_seq=np.full(p, 1.0 / p))
    else:
        cfg = GrowConfig(q=max(1, math.ceil(p / 3)), n_min=n_min, kind="cart")
    forest = grow_forest(data, cfg, n_trees, seed)
    ctx = CriterionContext.from_forest(forest, data)
    two = solve_two_steps(ctx)
    weights = {"2steps": two.w, "rf": equal_weights(n_trees)}
    if with_one_step:
        weights["1step"] = solve_one_step(ctx, two_steps=two).w
    _, best = infeasible_best(forest.hats, data.y, mu)
    out = {"loss": {m: loss_Ln(forest.hats, w, data.y, mu) / best for m, w in weights.items()},
           "diag": forest_diagnostics(forest)}
    if with_risk:
        _, best_r = infeasible_best_risk(forest.hats, mu, sigma2)
        out["risk"] = {m: risk_Rn(forest.hats, w, mu, sigma2) / best_r for m, w in weights.items()}
    return out


def optimality_ratio_study(n_values, n_trees=50, tree_kind="sut", reps=20, p=5,
                           n_min=5, mu_fn="linear", noise="homo", sigma=1.0, seed=0,
                           with_one_step=True, with_risk=False) -> RatioReport:
    """Loss ratios L_n(w)/inf_w L_n(w) of the fitted weights across sample sizes.

    Replication r at size n uses data seed ``seed + 7919 r + n``; the forest
    shares that seed.
    """
    report = RatioReport(list(n_values), n_trees, tree_kind, reps,
                         {"p": p, "n_min": n_min, "mu_fn": mu_fn, "noise": noise,
                          "sigma": sigma, "seed": seed})
    for n in n_values:
        per_method, per_method_r = {}, {}
        min_leaf, max_diag = [], []
        for r in range(reps):
            out = ratio_replication(n, p, n_trees, tree_kind, n_min, mu_fn, noise, sigma,
                                    seed + 7919 * r + n, with_one_step, with_risk)
            for m, v in out["loss"].items():
                per_method.setdefault(m, []).append(v)
            for m, v in out.get("risk", {}).items():
                per_method_r.setdefault(m, []).append(v)
            min_leaf.append(out["diag"]["min_leaf_size"])
            max_diag.append(out["diag"]["max_hat_diag"])
        for m, v in per_method.items():
            report.ratios.setdefault(m, []).append(v)
        for m, v in per_method_r.items():
            report.risk_ratios.setdefault(m, []).append(v)
        ml = int(min(min_leaf))
        report.diagnostics.append({"n": n, "min_leaf_size": ml, "max_hat_diag": float(max(max_diag)),
                                   "sqrt_n_over_min_leaf": math.sqrt(n) / ml})
    return report
