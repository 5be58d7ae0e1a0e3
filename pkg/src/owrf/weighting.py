"""Mallows-type weight choice for forests, plus the out-of-bag competitors.

All criteria share the residual matrix ``E`` (column m is ``y - P_m y``) and
the hat-diagonal matrix ``D`` (column m is ``diag(P_m)``). With ``r = E w``
and ``d = D w``:

* ``C'(w)  = |r|^2 + 2 sum_i r_i^2 d_i``          (cubic, one-step method)
* ``C0(w)  = |r|^2 + 2 s2 sum_m w_m tr(P_m)``     (quadratic, first of two steps)
* ``C''(w) = |r|^2 + 2 sum_i e_i^2 d_i``          (quadratic, second step)
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import Dataset, Forest, clean_weights, equal_weights
from .simplex import SolveReport, kkt_residual, project_simplex, solve_quadratic_simplex
from .trees import hat_matrix


STALL_TOL = 1e-6


class NoOOBError(ValueError):
    """A tree has no out-of-bag observations."""


@dataclass(frozen=True, eq=False)
class CriterionContext:
    y: np.ndarray
    residuals: np.ndarray  # (n, M)
    diags: np.ndarray  # (n, M)
    traces: np.ndarray  # (M,)
    hats: tuple = ()

    @property
    def n(self) -> int:
        return self.residuals.shape[0]

    @property
    def n_trees(self) -> int:
        return self.residuals.shape[1]

    @classmethod
    def from_forest(cls, forest: Forest, data: Dataset) -> "CriterionContext":
        hats = forest.hats
        if hats is None:
            hats = [hat_matrix(t, data) for t in forest.trees]
            forest.hats = hats
        return cls.from_hats(hats, data.y)

    @classmethod
    def from_hats(cls, hats, y) -> "CriterionContext":
        y = np.asarray(y, dtype=float)
        fits = np.column_stack([h.dot(y) for h in hats])
        diags = np.column_stack([h.diag for h in hats])
        return cls(y, y[:, None] - fits, diags, diags.sum(axis=0), tuple(hats))

    def residual(self, w) -> np.ndarray:
        return self.residuals @ np.asarray(w, dtype=float)

    def diag(self, w) -> np.ndarray:
        return self.diags @ np.asarray(w, dtype=float)

    def gram(self) -> np.ndarray:
        return self.residuals.T @ self.residuals

    def sigma2_equal(self) -> float:
        r = self.residual(equal_weights(self.n_trees))
        return float(r @ r) / self.n


def criterion_c_prime(ctx: CriterionContext, w) -> float:
    r = ctx.residual(w)
    return float(r @ r + 2.0 * (r * r) @ ctx.diag(w))


def grad_c_prime(ctx: CriterionContext, w) -> np.ndarray:
    r = ctx.residual(w)
    d = ctx.diag(w)
    return 2.0 * ctx.residuals.T @ (r * (1.0 + 2.0 * d)) + 2.0 * ctx.diags.T @ (r * r)


def criterion_c_zero(ctx: CriterionContext, w, sigma2: float) -> float:
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    r = ctx.residual(w)
    return float(r @ r + 2.0 * sigma2 * (ctx.traces @ np.asarray(w, dtype=float)))


def criterion_c_dprime(ctx: CriterionContext, w, e_tilde) -> float:
    e_tilde = np.asarray(e_tilde, dtype=float)
    if e_tilde.shape != (ctx.n,):
        raise ValueError(f"e_tilde must have length {ctx.n}")
    r = ctx.residual(w)
    return float(r @ r + 2.0 * (e_tilde * e_tilde) @ ctx.diag(w))


def c_zero_qp(ctx: CriterionContext, sigma2: float):
    """(G, b) with C0(w) = w'Gw + b'w on the simplex."""
    return ctx.gram(), 2.0 * sigma2 * ctx.traces


def c_dprime_qp(ctx: CriterionContext, e_tilde):
    e_tilde = np.asarray(e_tilde, dtype=float)
    return ctx.gram(), 2.0 * ctx.diags.T @ (e_tilde * e_tilde)


def solve_two_steps(ctx: CriterionContext) -> SolveReport:
    t0 = time.perf_counter()
    sigma2 = ctx.sigma2_equal()
    first = solve_quadratic_simplex(*c_zero_qp(ctx, sigma2))
    w_star = clean_weights(first.w)
    e_tilde = ctx.residual(w_star)
    second = solve_quadratic_simplex(*c_dprime_qp(ctx, e_tilde))
    w = clean_weights(second.w)
    return SolveReport(
        w=w,
        objective=criterion_c_dprime(ctx, w, e_tilde),
        iterations=first.iterations + second.iterations,
        converged=first.converged and second.converged,
        wall_time=time.perf_counter() - t0,
        method="2steps",
        extra={"sigma2": sigma2, "w_star": w_star, "e_tilde": e_tilde,
               "objective_c0": first.objective},
    )


def _pg_armijo(ctx, w, max_iter, tol, sigma=1e-4):
    """Projected gradient on C' with Barzilai-Borwein trial steps and
    monotone Armijo backtracking along the projection arc."""
    f = criterion_c_prime(ctx, w)
    g = grad_c_prime(ctx, w)
    step = 1.0 / max(float(np.abs(g).max()), 1e-300)
    it = 0
    res = kkt_residual(w, g)
    while it < max_iter and res >= tol:
        it += 1
        alpha = step
        while True:
            w_new = project_simplex(w - alpha * g)
            f_new = criterion_c_prime(ctx, w_new)
            if f_new <= f + sigma * (g @ (w_new - w)):
                break
            alpha *= 0.5
            if alpha < 1e-30:  # no representable decrease left
                return w, f, it, res, True
        g_new = grad_c_prime(ctx, w_new)
        s, yv = w_new - w, g_new - g
        sy = float(s @ yv)
        step = float(s @ s) / sy if sy > 0 else 2.0 * alpha
        step = min(max(step, 1e-30), 1e30)
        w, f, g = w_new, f_new, g_new
        res = kkt_residual(w, g)
    return w, f, it, res, False


def solve_one_step(ctx: CriterionContext, max_iter: int = 5000, tol: float = 1e-9,
                   two_steps: SolveReport = None) -> SolveReport:
    """Minimise the cubic criterion C' over the simplex.

    Runs projected gradient from equal weights and from the two-step solution
    and keeps the better end point; the result never scores worse than
    either start.
    """
    t0 = time.perf_counter()
    m = ctx.n_trees
    if m == 1:
        w = np.ones(1)
        return SolveReport(w, criterion_c_prime(ctx, w), 0, True, time.perf_counter() - t0, "1step")
    if two_steps is None:
        two_steps = solve_two_steps(ctx)
    best = None
    iters = 0
    for start in (equal_weights(m), two_steps.w):
        w, f, it, res, stalled = _pg_armijo(ctx, start.copy(), max_iter, tol)
        iters += it
        if best is None or f < best[1]:
            best = (w, f, stalled)
    w = clean_weights(best[0])
    f = criterion_c_prime(ctx, w)
    if f > best[1]:
        w, f = best[0], best[1]
    res = kkt_residual(w, grad_c_prime(ctx, w))
    # a stall with a small residual means stationary to working precision
    converged = res < tol or (best[2] and res < STALL_TOL)
    return SolveReport(w, f, iters, converged, time.perf_counter() - t0, "1step",
                       extra={"kkt_residual": res, "stalled": best[2]})


def oob_errors(forest: Forest, data: Dataset) -> np.ndarray:
    """Per-tree mean absolute out-of-bag error; NaN marks trees with no OOB rows."""
    out = np.full(forest.n_trees, np.nan)
    for m in range(forest.n_trees):
        try:
            out[m] = tpe_star(m, forest, data)
        except NoOOBError:
            pass
    return out


def tpe_star(tree_index: int, forest: Forest, data: Dataset) -> float:
    oob = forest.samples[tree_index].oob
    if not oob.any():
        raise NoOOBError(f"tree {tree_index} has no out-of-bag observations")
    pred = forest.trees[tree_index].predict(data.X[oob])
    return float(np.mean(np.abs(pred - data.y[oob])))


def _fill_missing_tpe(tpe):
    tpe = np.asarray(tpe, dtype=float).copy()
    missing = np.isnan(tpe)
    if missing.all():
        return np.ones_like(tpe)
    tpe[missing] = tpe[~missing].mean()
    return tpe


def wrf_weights_from_tpe(tpe, lam: float = 1.0, variant: str = "power") -> np.ndarray:
    """Weights decreasing in tree error. ``variant``: "power" (1/tPE)^lam,
    "linear" 1 - tPE (clipped at 0) or "exp" exp(1/tPE)."""
    tpe = _fill_missing_tpe(tpe)
    zero = tpe <= 0
    if zero.any():
        return zero / zero.sum()
    if variant == "power":
        logw = -lam * np.log(tpe)
        w = np.exp(logw - logw.max())
    elif variant == "exp":
        inv = 1.0 / tpe
        w = np.exp(inv - inv.max())
    elif variant == "linear":
        w = np.maximum(1.0 - tpe, 0.0)
        if w.sum() <= 0:
            return equal_weights(tpe.size)
    else:
        raise ValueError(f"unknown wRF variant {variant!r}")
    return clean_weights(w / w.sum())


def wrf_weights(forest: Forest, data: Dataset, lam: float = 1.0, variant: str = "power") -> np.ndarray:
    return wrf_weights_from_tpe(oob_errors(forest, data), lam, variant)


def cesaro_weights(ranks) -> list:
    """Exact Cesaro weights for 1-based ``ranks``: sum_{k=r}^{M} 1/k, normalised."""
    ranks = [int(r) for r in ranks]
    M = len(ranks)
    tail = [Fraction(0)] * (M + 2)
    for k in range(M, 0, -1):
        tail[k] = tail[k + 1] + Fraction(1, k)
    raw = [tail[r] for r in ranks]
    total = sum(tail[1:M + 1], Fraction(0))
    return [x / total for x in raw]


def tpe_ranks(tpe) -> np.ndarray:
    """1-based ranks by ascending error; ties keep tree order."""
    tpe = _fill_missing_tpe(tpe)
    order = np.argsort(tpe, kind="stable")
    ranks = np.empty(tpe.size, dtype=np.int64)
    ranks[order] = np.arange(1, tpe.size + 1)
    return ranks


def crf_weights_from_tpe(tpe) -> np.ndarray:
    return np.array([float(x) for x in cesaro_weights(tpe_ranks(tpe))])


def crf_weights(forest: Forest, data: Dataset) -> np.ndarray:
    return crf_weights_from_tpe(oob_errors(forest, data))
