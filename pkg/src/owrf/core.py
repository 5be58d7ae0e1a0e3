"""Domain types shared across the package: datasets, bootstrap samples,
regression trees, per-tree hat matrices, weight vectors and forests."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

METHODS = ("rf", "2steps", "1step", "wrf", "crf")
TREE_KINDS = ("cart", "sut")


class DimensionError(ValueError):
    """Raised when array shapes disagree with the model."""


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DimensionError(f"X must be a non-empty 2-d array, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise DimensionError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValueError("Dataset contains missing or non-finite values")
        names = tuple(self.names) if len(self.names) else tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DimensionError(f"{len(names)} names for {X.shape[1]} columns")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.X[rows], self.y[rows], self.names)


@dataclass(frozen=True, eq=False)
class BootstrapSample:
    """Multiplicity histogram of a bootstrap draw: ``counts[i]`` copies of row i."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0:
            raise ValueError("counts must be a non-empty vector")
        if (counts < 0).any():
            raise ValueError("bootstrap counts must be non-negative")
        if counts.sum() != counts.size:
            raise ValueError(f"bootstrap counts sum to {counts.sum()}, expected {counts.size}")
        object.__setattr__(self, "counts", counts)

    @property
    def n(self) -> int:
        return self.counts.size

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def oob(self) -> np.ndarray:
        return self.counts == 0


@dataclass(frozen=True, eq=False)
class Leaf:
    members: np.ndarray  # training row indices with h > 0
    counts: np.ndarray  # bootstrap multiplicities of those rows
    mean: float

    @property
    def size(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Binary tree stored as parallel node arrays.

    Node ``k`` is internal when ``feature[k] >= 0``: rows with
    ``x[feature[k]] <= cut[k]`` go to ``left[k]``, the rest to ``right[k]``.
    Leaf nodes point into ``leaves`` through ``leaf_index[k]``. ``gain[k]``
    holds the split quality (SSE decrease for CART, score for SUT).
    """

    kind: str
    feature: np.ndarray
    cut: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_index: np.ndarray
    gain: np.ndarray
    leaves: tuple
    n_features: int

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @property
    def leaf_means(self) -> np.ndarray:
        return np.array([leaf.mean for leaf in self.leaves])

    def apply(self, X) -> np.ndarray:
        """Return the leaf number reached by each row of ``X``."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionError(
                f"expected {self.n_features} columns, got array of shape {X.shape}")
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.arange(X.shape[0])
        while active.size:
            f = self.feature[node[active]]
            internal = f >= 0
            active = active[internal]
            if not active.size:
                break
            cur = node[active]
            go_left = X[active, f[internal]] <= self.cut[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return self.leaf_index[node]

    def predict(self, X) -> np.ndarray:
        return self.leaf_means[self.apply(X)]

    def to_dict(self) -> dict:
        """Canonical nested representation used for JSON dumps."""

        def build(k):
            if self.feature[k] < 0:
                leaf = self.leaves[self.leaf_index[k]]
                return {
                    "members": [[int(i), int(h)] for i, h in zip(leaf.members, leaf.counts)],
                    "mean": float(leaf.mean),
                }
            return {
                "feature": int(self.feature[k]),
                "cut": float(self.cut[k]),
                "left": build(int(self.left[k])),
                "right": build(int(self.right[k])),
            }

        return {"kind": self.kind, "n_features": self.n_features, "root": build(0)}

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        feature, cut, left, right, leaf_index, gain, leaves = [], [], [], [], [], [], []

        def add(node):
            k = len(feature)
            feature.append(-1)
            cut.append(np.nan)
            left.append(-1)
            right.append(-1)
            leaf_index.append(-1)
            gain.append(0.0)
            if "members" in node:
                members = np.array([m[0] for m in node["members"]], dtype=np.int64)
                counts = np.array([m[1] for m in node["members"]], dtype=np.int64)
                leaf_index[k] = len(leaves)
                leaves.append(Leaf(members, counts, float(node["mean"])))
            else:
                feature[k] = int(node["feature"])
                cut[k] = float(node["cut"])
                left[k] = add(node["left"])
                right[k] = add(node["right"])
            return k

        add(d["root"])
        return cls(
            kind=d["kind"],
            feature=np.array(feature, dtype=np.int64),
            cut=np.array(cut, dtype=float),
            left=np.array(left, dtype=np.int64),
            right=np.array(right, dtype=np.int64),
            leaf_index=np.array(leaf_index, dtype=np.int64),
            gain=np.array(gain, dtype=float),
            leaves=tuple(leaves),
            n_features=int(d["n_features"]),
        )


@dataclass(frozen=True, eq=False)
class HatMatrix:
    """Row-sparse n x n smoother mapping training ``y`` to one tree's fit."""

    matrix: sp.csr_matrix
    diag: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def trace(self) -> float:
        return float(self.diag.sum())

    def dot(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def check_simplex(w, tol: float = 1e-8) -> np.ndarray:
    """Validate a weight vector and return it as a float array."""
    w = np.asarray(w, dtype=float).ravel()
    if w.size == 0 or not np.isfinite(w).all():
        raise ValueError("weights must be a non-empty finite vector")
    if w.min() < 0 or abs(w.sum() - 1.0) > tol:
        raise ValueError(f"weights are not on the simplex (min={w.min():.3g}, sum={w.sum():.12g})")
    return w


def clean_weights(w, floor: float = 1e-12) -> np.ndarray:
    """Snap tiny or negative coordinates to zero and renormalise."""
    w = np.asarray(w, dtype=float).copy()
    w[w < floor] = 0.0
    s = w.sum()
    if s <= 0:
        return np.full(w.size, 1.0 / w.size)
    return w / s


def equal_weights(m: int) -> np.ndarray:
    return np.full(m, 1.0 / m)


@dataclass(eq=False)
class Forest:
    trees: list
    samples: list
    weights: np.ndarray
    method: str = "rf"
    hats: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.trees) < 1:
            raise ValueError("a forest needs at least one tree")
        if len(self.samples) != len(self.trees):
            raise ValueError("trees and samples differ in length")
        if self.hats is not None and len(self.hats) != len(self.trees):
            raise ValueError("trees and hats differ in length")
        self.weights = check_simplex(self.weights)
        if self.weights.size != len(self.trees):
            raise ValueError("one weight per tree is required")

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def with_weights(self, weights, method: str) -> "Forest":
        return Forest(self.trees, self.samples, weights, method, self.hats, dict(self.meta))

    def tree_predictions(self, X) -> np.ndarray:
        """(rows, trees) matrix of per-tree predictions."""
        return np.column_stack([t.predict(X) for t in self.trees])


def aggregate_predict(forest: Forest, Xnew, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Weighted average of per-tree leaf means at each row of ``Xnew``."""
    Xnew = np.asarray(Xnew, dtype=float)
    if Xnew.ndim == 1:
        Xnew = Xnew.reshape(1, -1)
    p = forest.trees[0].n_features
    if Xnew.shape[1] != p:
        raise DimensionError(f"expected {p} columns, got {Xnew.shape[1]}")
    w = forest.weights if weights is None else check_simplex(weights)
    return forest.tree_predictions(Xnew) @ w
