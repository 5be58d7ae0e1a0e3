"""Probability-simplex geometry and a convex QP solver over the simplex.

The QP is ``min_w  w'Gw + b'w  s.t.  w >= 0, sum(w) = 1`` with ``G`` symmetric
positive semi-definite. It is solved by a primal active-set method that copes
with singular ``G`` (identical trees, more trees than observations) by
following zero-curvature descent directions to the boundary.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np


class InputError(ValueError):
    """Raised for non-finite or non-PSD QP data."""


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def kkt_residual(w, g) -> float:
    """Scale-free stationarity measure of ``w`` for gradient ``g`` on the simplex.

    This is the Frank-Wolfe gap ``w'g - min(g)``, an upper bound on the
    suboptimality of a convex objective, divided by ``1 + max|g|``.
    """
    w = np.asarray(w, dtype=float)
    g = np.asarray(g, dtype=float)
    gap = max(float(w @ g - g.min()), 0.0)
    return gap / (1.0 + float(np.abs(g).max()))


@dataclass
class SolveReport:
    w: np.ndarray
    objective: float
    iterations: int
    converged: bool
    wall_time: float
    method: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "weights": [float(x) for x in self.w],
            "objective": float(self.objective),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "wall_time_s": float(self.wall_time),
        }


def _check_qp(G, b):
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    if G.ndim != 2 or G.shape[0] != G.shape[1] or G.shape[0] != b.size:
        raise InputError(f"incompatible shapes G{G.shape}, b{b.shape}")
    if not (np.isfinite(G).all() and np.isfinite(b).all()):
        raise InputError("QP data contains non-finite entries")
    G = 0.5 * (G + G.T)
    scale = max(1.0, float(np.abs(G).max()))
    if G.shape[0] > 1:
        lam_min = float(np.linalg.eigvalsh(G).min())
        if lam_min < -1e-8 * scale:
            raise InputError(f"G is not positive semi-definite (min eigenvalue {lam_min:.3g})")
    return G, b


def _nullspace_basis(k: int) -> np.ndarray:
    """Orthonormal basis (k x k-1) of {d in R^k : sum(d) = 0}."""
    if k == 1:
        return np.zeros((1, 0))
    q, _ = np.linalg.qr(np.vstack([np.ones(k), np.eye(k)[: k - 1]]).T)
    return q[:, 1:]


def _active_set(G, b, w, tol, max_iter):
    m = b.size
    free = w > 0
    it = 0
    scale = max(1.0, float(np.abs(G).max()), float(np.abs(b).max()))
    while it < max_iter:
        it += 1
        g = 2.0 * G @ w + b
        F = np.nonzero(free)[0]
        Z = _nullspace_basis(F.size)
        step = np.zeros(m)
        if Z.shape[1]:
            H = Z.T @ (2.0 * G[np.ix_(F, F)]) @ Z
            gr = Z.T @ g[F]
            lam, V = np.linalg.eigh(H)
            cut = 1e-11 * max(scale, float(np.abs(lam).max()))
            pos = lam > cut
            coef = V.T @ gr
            flat = coef[~pos]
            if flat.size and np.abs(flat).max() > 1e-12 * scale:
                # objective is linear along these directions: descend to the boundary
                d = -(V[:, ~pos] @ flat)
                step[F] = Z @ d
                newton = False
            else:
                step[F] = -Z @ (V[:, pos] @ (coef[pos] / lam[pos]))
                newton = True
        if np.abs(step).max() <= 1e-12:
            nu = float(g[F].mean())
            viol = nu - g[~free]
            if viol.size == 0 or viol.max() <= tol * scale:
                return w, it, True
            drop = np.nonzero(~free)[0][int(np.argmax(viol))]
            free[drop] = True
            continue
        neg = step < 0
        ratios = np.full(m, np.inf)
        ratios[neg] = w[neg] / -step[neg]
        blocking = int(np.argmin(ratios))
        alpha = ratios[blocking]
        if newton and alpha >= 1.0:
            w = w + step
        else:
            if not np.isfinite(alpha):
                # unbounded linear direction cannot occur on the simplex
                return w, it, False
            w = w + alpha * step
            w[blocking] = 0.0
            free[blocking] = False
        w = np.where(free, np.maximum(w, 0.0), 0.0)
        w /= w.sum()
    return w, it, False


def _projected_gradient(G, b, w, max_iter=20000, tol=1e-12):
    L = 2.0 * max(float(np.linalg.eigvalsh(G).max()), 1e-12)
    x = w.copy()
    z = w.copy()
    t = 1.0
    for it in range(1, max_iter + 1):
        g = 2.0 * G @ z + b
        x_new = project_simplex(z - g / L)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = x_new + ((t - 1) / t_new) * (x_new - x)
        if np.abs(x_new - x).max() < tol:
            return x_new, it
        x, t = x_new, t_new
    return x, max_iter


def qp_objective(G, b, w) -> float:
    w = np.asarray(w, dtype=float)
    return float(w @ G @ w + b @ w)


def solve_quadratic_simplex(G, b, tol: float = 1e-9, max_iter: int = None) -> SolveReport:
    """Minimise ``w'Gw + b'w`` over the probability simplex."""
    t0 = time.perf_counter()
    G, b = _check_qp(G, b)
    m = b.size
    if m == 1:
        w = np.ones(1)
        return SolveReport(w, qp_objective(G, b, w), 0, True, time.perf_counter() - t0)
    max_iter = max_iter or 20 * m + 50
    start = int(np.argmin(np.diag(G) + b))
    w = np.zeros(m)
    w[start] = 1.0
    w, iters, ok = _active_set(G, b, w, tol, max_iter)
    w = np.maximum(w, 0.0)
    w /= w.sum()
    if not ok:
        w_pg, it_pg = _projected_gradient(G, b, w)
        iters += it_pg
        if qp_objective(G, b, w_pg) < qp_objective(G, b, w):
            w = w_pg
    w = _snap(w)
    g = 2.0 * G @ w + b
    res = kkt_residual(w, g)
    return SolveReport(w, qp_objective(G, b, w), iters, res < tol,
                       time.perf_counter() - t0, extra={"kkt_residual": res})


def _snap(w, floor=1e-12):
    w = np.where(w < floor, 0.0, w)
    return w / w.sum()


def grid_simplex(m: int, step: float) -> np.ndarray:
    """All simplex points whose coordinates are multiples of ``step`` (brute-force oracle)."""
    k = int(round(1.0 / step))
    if abs(k * step - 1.0) > 1e-12:
        raise ValueError("1/step must be an integer")
    pts = np.zeros((1, 0), dtype=np.int64)
    for _ in range(m - 1):
        a = np.repeat(pts, k + 1, axis=0)
        c = np.tile(np.arange(k + 1), pts.shape[0])[:, None]
        pts = np.hstack([a, c])
        pts = pts[pts.sum(axis=1) <= k]
    last = k - pts.sum(axis=1, keepdims=True)
    return np.hstack([pts, last]).astype(float) / k
