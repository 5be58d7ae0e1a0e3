"""Bootstrap sampling, CART / split-unsupervised tree growth, hat matrices
and impurity-based variable importance."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .core import (
    BootstrapSample,
    Dataset,
    Forest,
    HatMatrix,
    Leaf,
    RegressionTree,
    equal_weights,
)


@dataclass(frozen=True, eq=False)
class GrowConfig:
    """Hyper-parameters of a single tree.

    ``n_min`` is the minimum (bootstrap) node size for attempting a split.
    ``prob_seq`` is the feature-sampling distribution used by SUT trees.
    """

    q: int
    n_min: int
    kind: str = "cart"
    prob_seq: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("cart", "sut"):
            raise ValueError(f"unknown tree kind {self.kind!r}")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.n_min < 1:
            raise ValueError("n_min must be >= 1")
        if self.kind == "sut":
            if self.prob_seq is None:
                raise ValueError("SUT trees need a probability sequence")
            ps = np.asarray(self.prob_seq, dtype=float)
            if (ps < 0).any() or abs(ps.sum() - 1.0) > 1e-10:
                raise ValueError("prob_seq must be non-negative and sum to 1")
            object.__setattr__(self, "prob_seq", ps)

    @classmethod
    def default(cls, kind: str, n: int, p: int, prob_seq=None) -> "GrowConfig":
        """Settings used in the benchmarks: q = ceil(p/3); n_min = ceil(sqrt(n))
        for CART and 5 for SUT; uniform feature probabilities if none given."""
        q = max(1, math.ceil(p / 3))
        if kind == "cart":
            return cls(q=q, n_min=max(1, math.ceil(math.sqrt(n))), kind="cart")
        if prob_seq is None:
            prob_seq = np.full(p, 1.0 / p)
        return cls(q=q, n_min=5, kind="sut", prob_seq=prob_seq)

    def check(self, p: int):
        if self.q > p:
            raise ValueError(f"q={self.q} exceeds the number of features p={p}")
        if self.kind == "sut" and self.prob_seq.size != p:
            raise ValueError(f"prob_seq has length {self.prob_seq.size}, expected {p}")


def bootstrap_sample(n: int, rng: np.random.Generator) -> BootstrapSample:
    if n < 1:
        raise ValueError("bootstrap needs n >= 1")
    draws = rng.integers(0, n, size=n)
    return BootstrapSample(np.bincount(draws, minlength=n))


def _scaled_frobenius(X: np.ndarray, w: np.ndarray) -> float:
    """Frobenius norm of the column-centred, column-scaled copy of ``X`` whose
    rows carry multiplicities ``w``. Constant columns contribute zero."""
    total = w.sum()
    if total < 2 or X.shape[0] == 0:
        return 0.0
    mean = (w @ X) / total
    dev = X - mean
    ss = w @ (dev * dev)
    nonconst = X.max(axis=0) > X.min(axis=0)
    var = ss / (total - 1)
    contrib = np.where(nonconst, ss / np.where(nonconst, var, 1.0), 0.0)
    return float(math.sqrt(contrib.sum()))


def _score_from_parts(norm_p, n_p, norm_l, n_l, norm_r, n_r) -> float:
    if n_l == 0 or n_r == 0:
        return -math.inf
    if norm_p == 0:
        return 0.0
    return (norm_p - (n_l / n_p) * norm_l - (n_r / n_p) * norm_r) / norm_p


def sut_score(parent, left, right) -> float:
    """Scale-free dispersion reduction of splitting ``parent`` into ``left`` and
    ``right`` (row matrices; repeated rows count with multiplicity)."""
    parent = np.atleast_2d(np.asarray(parent, dtype=float))
    left = np.asarray(left, dtype=float).reshape(-1, parent.shape[1])
    right = np.asarray(right, dtype=float).reshape(-1, parent.shape[1])
    if parent.shape[0] == 0:
        raise ValueError("parent node is empty")
    norm = lambda A: _scaled_frobenius(A, np.ones(A.shape[0]))
    return _score_from_parts(
        norm(parent), parent.shape[0],
        norm(left) if left.shape[0] else 0.0, left.shape[0],
        norm(right) if right.shape[0] else 0.0, right.shape[0],
    )


def _cart_split(Xn, yn, h, features):
    """Best (feature, cut, sse) over the candidate features, or None.

    Candidate cuts are midpoints between consecutive distinct values; ties go
    to the lower feature index and then the lower cut.
    """
    total_w = h.sum()
    yc = yn - (h @ yn) / total_w
    best = None
    for j in sorted(features):
        order = np.argsort(Xn[:, j], kind="stable")
        xs = Xn[order, j]
        ws = h[order].astype(float)
        ys = yc[order]
        cw = np.cumsum(ws)[:-1]
        cwy = np.cumsum(ws * ys)[:-1]
        cwy2 = np.cumsum(ws * ys * ys)[:-1]
        tw, twy, twy2 = ws.sum(), (ws * ys).sum(), (ws * ys * ys).sum()
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue
        sse_l = cwy2 - cwy * cwy / cw
        rw = tw - cw
        sse_r = (twy2 - cwy2) - (twy - cwy) ** 2 / rw
        sse = np.where(valid, sse_l + sse_r, np.inf)
        k = int(np.argmin(sse))
        if best is None or sse[k] < best[2]:
            cut = 0.5 * (xs[k] + xs[k + 1])
            if not cut < xs[k + 1]:
                cut = xs[k]
            best = (j, float(cut), float(sse[k]))
    return best


def _sut_split(Xn, h, features):
    """Best (feature, cut, score) among midpoint splits of the drawn features."""
    n_p = h.sum()
    norm_p = _scaled_frobenius(Xn, h)
    best = None
    for j in sorted(features):
        col = Xn[:, j]
        cut = 0.5 * (col.min() + col.max())
        mask = col <= cut
        n_l, n_r = h[mask].sum(), h[~mask].sum()
        if n_l == 0 or n_r == 0:
            continue
        score = _score_from_parts(
            norm_p, n_p,
            _scaled_frobenius(Xn[mask], h[mask]), n_l,
            _scaled_frobenius(Xn[~mask], h[~mask]), n_r,
        )
        if best is None or score > best[2]:
            best = (j, float(cut), float(score))
    return best


def _draw_features(nonconst, cfg: GrowConfig, rng):
    if cfg.kind == "cart":
        k = min(cfg.q, nonconst.size)
        return rng.choice(nonconst, size=k, replace=False)
    probs = cfg.prob_seq[nonconst]
    pos = probs > 0
    if not pos.any():
        return np.empty(0, dtype=np.int64)
    cand, probs = nonconst[pos], probs[pos]
    k = min(cfg.q, cand.size)
    return rng.choice(cand, size=k, replace=False, p=probs / probs.sum())


def grow_tree(data: Dataset, sample: BootstrapSample, cfg: GrowConfig,
              rng: np.random.Generator) -> RegressionTree:
    """Grow a CART or SUT tree on the bootstrap ``sample`` of ``data``.

    Nodes are expanded depth-first. A node becomes a leaf when its bootstrap
    size is below ``n_min``, every feature is constant, the response is
    constant, or no admissible split exists.
    """
    cfg.check(data.p)
    if sample.n != data.n:
        raise ValueError("bootstrap sample does not match the dataset size")
    X, y = data.X, data.y
    root = np.nonzero(sample.counts)[0]

    feature, cut, left, right, leaf_index, gain = [], [], [], [], [], []
    leaves = []

    def new_node():
        feature.append(-1)
        cut.append(np.nan)
        left.append(-1)
        right.append(-1)
        leaf_index.append(-1)
        gain.append(0.0)
        return len(feature) - 1

    def make_leaf(k, idx, h):
        leaf_index[k] = len(leaves)
        leaves.append(Leaf(idx, h, float(h @ y[idx] / h.sum())))

    stack = [(new_node(), root)]
    while stack:
        k, idx = stack.pop()
        h = sample.counts[idx]
        Xn = X[idx]
        if h.sum() < cfg.n_min:
            make_leaf(k, idx, h)
            continue
        nonconst = np.nonzero(Xn.max(axis=0) > Xn.min(axis=0))[0]
        yn = y[idx]
        if nonconst.size == 0 or yn.max() == yn.min():
            make_leaf(k, idx, h)
            continue
        feats = _draw_features(nonconst, cfg, rng)
        if cfg.kind == "cart":
            found = _cart_split(Xn, yn, h, feats) if feats.size else None
            if found is not None:
                yc = yn - (h @ yn) / h.sum()
                found = (found[0], found[1], float(h @ (yc * yc)) - found[2])
        else:
            found = _sut_split(Xn, h, feats) if feats.size else None
        if found is None:
            make_leaf(k, idx, h)
            continue
        j, c, g = found
        mask = Xn[:, j] <= c
        lk, rk = new_node(), new_node()
        feature[k], cut[k], left[k], right[k], gain[k] = j, c, lk, rk, g
        stack.append((rk, idx[~mask]))
        stack.append((lk, idx[mask]))

    return RegressionTree(
        kind=cfg.kind,
        feature=np.array(feature, dtype=np.int64),
        cut=np.array(cut, dtype=float),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        leaf_index=np.array(leaf_index, dtype=np.int64),
        gain=np.array(gain, dtype=float),
        leaves=tuple(leaves),
        n_features=data.p,
    )


def grow_cart(data, sample, cfg, rng):
    if cfg.kind != "cart":
        raise ValueError("grow_cart needs a CART config")
    return grow_tree(data, sample, cfg, rng)


def grow_sut(data, sample, cfg, rng):
    if cfg.kind != "sut":
        raise ValueError("grow_sut needs a SUT config")
    return grow_tree(data, sample, cfg, rng)


def hat_matrix(tree: RegressionTree, data: Dataset) -> HatMatrix:
    n = data.n
    leaf_of_row = tree.apply(data.X)
    sizes = np.array([leaf.size for leaf in tree.leaves], dtype=float)
    rows, cols, vals = [], [], []
    member_leaf = np.full(n, -1, dtype=np.int64)
    h = np.zeros(n)
    for l, leaf in enumerate(tree.leaves):
        rows.append(np.full(leaf.members.size, l))
        cols.append(leaf.members)
        vals.append(leaf.counts / sizes[l])
        member_leaf[leaf.members] = l
        h[leaf.members] = leaf.counts
    B = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(tree.leaves), n),
    )
    A = sp.csr_matrix((np.ones(n), (np.arange(n), leaf_of_row)), shape=(n, len(tree.leaves)))
    P = (A @ B).tocsr()
    P.sort_indices()
    diag = np.where(member_leaf == leaf_of_row, h / sizes[leaf_of_row], 0.0)
    return HatMatrix(P, diag)


def tree_seed(seed: int, index: int) -> int:
    return int(seed) + int(index)


def _grow_one(data, cfg, seed, m):
    rng = np.random.default_rng(tree_seed(seed, m))
    sample = bootstrap_sample(data.n, rng)
    return grow_tree(data, sample, cfg, rng), sample


def grow_forest(data: Dataset, cfg: GrowConfig, n_trees: int, seed: int,
                with_hats: bool = True, n_jobs: int = 1) -> Forest:
    """Grow ``n_trees`` trees; tree m uses its own generator seeded ``seed + m``
    so the result does not depend on ``n_jobs``."""
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    cfg.check(data.p)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            grown = list(ex.map(lambda m: _grow_one(data, cfg, seed, m), range(n_trees)))
    else:
        grown = [_grow_one(data, cfg, seed, m) for m in range(n_trees)]
    trees = [t for t, _ in grown]
    samples = [s for _, s in grown]
    hats = [hat_matrix(t, data) for t in trees] if with_hats else None
    return Forest(trees, samples, equal_weights(n_trees), "rf", hats,
                  {"kind": cfg.kind, "q": cfg.q, "n_min": cfg.n_min, "seed": int(seed)})


def variable_importance(data: Dataset, cfg: GrowConfig, M: int, seed: int) -> np.ndarray:
    """Mean over M bootstrap CART trees of the SSE decrease credited to each feature."""
    if cfg.kind != "cart":
        raise ValueError("variable importance is computed from CART trees")
    imp = np.zeros(data.p)
    for m in range(M):
        tree, _ = _grow_one(data, cfg, seed, m)
        internal = tree.feature >= 0
        np.add.at(imp, tree.feature[internal], np.maximum(tree.gain[internal], 0.0))
    return imp / M


def prob_sequence_from_importance(imp) -> np.ndarray:
    imp = np.asarray(imp, dtype=float)
    if not np.isfinite(imp).all():
        raise ValueError("importances must be finite")
    imp = np.maximum(imp, 0.0)
    s = imp.sum()
    if s <= 0:
        return np.full(imp.size, 1.0 / imp.size)
    return imp / s
