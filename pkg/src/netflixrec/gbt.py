"""Gradient-boosted regression trees for squared error.

Each round fits a depth-limited tree to the current residuals. Splits are
found by exact greedy search over sorted unique feature values; the gain of
a split is the drop in the L2-regularized squared-error objective

    G_L^2/(n_L+lam) + G_R^2/(n_R+lam) - G^2/(n+lam)

with G the residual sum of a node, and leaf values are ``G/(n+lam)``.
Equal gains resolve to the lowest feature index, then the lowest threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit


@dataclass
class GbtConfig:
    rounds: int = 100
    max_depth: int = 3
    shrinkage: float = 0.1
    min_leaf: int = 1
    reg_lambda: float = 1.0
    seed: int = 0  # recorded for provenance; fitting is deterministic without it


@dataclass
class Split:
    feature: int
    threshold: float
    gain: float
    left: np.ndarray
    right: np.ndarray


@dataclass
class RegressionTree:
    """Flat binary tree. ``feature[k] == -1`` marks leaf ``k``.

    Rows with ``x[feature] <= threshold`` go to ``left``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    n_samples: np.ndarray
    max_depth: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(self.max_depth + 1):
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            rows = np.flatnonzero(inner)
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])
        return self.value[node]

    def depth(self) -> int:
        def walk(k):
            if self.feature[k] < 0:
                return 0
            return 1 + max(walk(self.left[k]), walk(self.right[k]))

        return walk(0)


@dataclass
class GbtModel:
    base_score: float
    trees: list
    shrinkage: float
    feature_schema: tuple
    mse_history: list = field(default_factory=list)

    def predict_table(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_schema):
            raise ValueError(f"expected width {len(self.feature_schema)}, got shape {X.shape}")
        out = np.full(len(X), self.base_score)
        for tree in self.trees:
            out += self.shrinkage * tree.predict(X)
        return out


def presort(X: np.ndarray) -> list[np.ndarray]:
    return [np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]


@njit(cache=True, nogil=True)
def _level_scan(xs, order, resid, slot, g_total, count, min_leaf, reg_lambda):
    """Best split of every open node at one depth, one pass per presorted feature.

    ``xs[f]`` holds feature f's values in ``order[f]`` row order.
    ``slot[row]`` is the row's node position in this level (-1 when the row
    sits in a finished leaf). Within a feature, gains are scanned in
    ascending value order and only a strictly larger gain replaces the
    incumbent, which yields the lowest-feature, lowest-threshold tie-break.
    """
    n_nodes = len(g_total)
    best_gain = np.zeros(n_nodes)
    best_f = np.full(n_nodes, -1, dtype=np.int64)
    best_lo = np.zeros(n_nodes)
    best_hi = np.zeros(n_nodes)
    parent = np.empty(n_nodes)
    for s in range(n_nodes):
        parent[s] = g_total[s] ** 2 / (count[s] + reg_lambda)
    gl = np.empty(n_nodes)
    nl = np.empty(n_nodes, dtype=np.int64)
    prev = np.empty(n_nodes)
    for f in range(xs.shape[0]):
        gl[:] = 0.0
        nl[:] = 0
        for p in range(xs.shape[1]):
            i = order[f, p]
            s = slot[i]
            if s < 0:
                continue
            x = xs[f, p]
            k = nl[s]
            if k > 0 and x != prev[s] and k >= min_leaf and count[s] - k >= min_leaf:
                gr = g_total[s] - gl[s]
                gain = gl[s] ** 2 / (k + reg_lambda) + gr**2 / (count[s] - k + reg_lambda) - parent[s]
                if gain > best_gain[s]:
                    best_gain[s] = gain
                    best_f[s] = f
                    best_lo[s] = prev[s]
                    best_hi[s] = x
            gl[s] += resid[i]
            nl[s] = k + 1
            prev[s] = x
    return best_f, best_lo, best_hi, best_gain


def _sorted_values(X: np.ndarray, order: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(X.T[np.arange(X.shape[1])[:, None], order])


def _midpoint(lo: float, hi: float) -> float:
    thr = lo + (hi - lo) / 2.0
    return thr if lo <= thr < hi else lo


def best_split(
    X: np.ndarray,
    resid: np.ndarray,
    rows: np.ndarray,
    min_leaf: int,
    reg_lambda: float,
    sorted_rows: Optional[list] = None,
) -> Optional[Split]:
    """Best positive-gain split of ``rows`` (ascending row ids), or None.

    ``sorted_rows`` is :func:`presort` of the full table; it saves a sort
    without changing the result.
    """
    X = np.asarray(X, dtype=np.float64)
    resid = np.asarray(resid, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.int64)
    n = len(rows)
    if n < 2 * min_leaf:
        return None
    order = np.asarray(sorted_rows if sorted_rows is not None else presort(X), dtype=np.int64).reshape(X.shape[1], -1)
    slot = np.full(len(X), -1, dtype=np.int64)
    slot[rows] = 0
    best_f, lo, hi, gain = _level_scan(_sorted_values(X, order), order, resid, slot, np.array([resid[rows].sum()]),
                                       np.array([n], dtype=np.int64), min_leaf, float(reg_lambda))
    f = int(best_f[0])
    if f < 0:
        return None
    thr = _midpoint(float(lo[0]), float(hi[0]))
    go_left = X[rows, f] <= thr
    return Split(f, thr, float(gain[0]), rows[go_left], rows[~go_left])


def fit_tree(
    X: np.ndarray,
    resid: np.ndarray,
    max_depth: int,
    min_leaf: int,
    reg_lambda: float,
    sorted_rows: Optional[list] = None,
) -> RegressionTree:
    """Grow one tree level by level; node ids follow breadth-first order."""
    X = np.asarray(X, dtype=np.float64)
    resid = np.asarray(resid, dtype=np.float64)
    order = np.asarray(sorted_rows if sorted_rows is not None else presort(X), dtype=np.int64).reshape(X.shape[1], -1)
    xs = _sorted_values(X, order)
    feature, threshold, left, right, value, gain, count = [], [], [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(resid[rows].sum() / (len(rows) + reg_lambda))
        gain.append(0.0)
        count.append(len(rows))
        return len(feature) - 1

    level = [(new_node(np.arange(len(X))), np.arange(len(X)))]
    for _ in range(max_depth):
        open_nodes = [(node, rows) for node, rows in level if len(rows) >= 2 * min_leaf]
        if not open_nodes:
            break
        slot = np.full(len(X), -1, dtype=np.int64)
        for s, (_, rows) in enumerate(open_nodes):
            slot[rows] = s
        totals = np.array([resid[rows].sum() for _, rows in open_nodes])
        sizes = np.array([len(rows) for _, rows in open_nodes], dtype=np.int64)
        best_f, best_lo, best_hi, best_gain = _level_scan(xs, order, resid, slot, totals, sizes, min_leaf,
                                                          float(reg_lambda))
        level = []
        for s, (node, rows) in enumerate(open_nodes):
            f = int(best_f[s])
            if f < 0:
                continue
            thr = _midpoint(float(best_lo[s]), float(best_hi[s]))
            go_left = X[rows, f] <= thr
            feature[node] = f
            threshold[node] = thr
            gain[node] = float(best_gain[s])
            value[node] = 0.0
            left[node] = new_node(rows[go_left])
            right[node] = new_node(rows[~go_left])
            level.append((left[node], rows[go_left]))
            level.append((right[node], rows[~go_left]))
    return RegressionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.float64),
        np.array(gain, dtype=np.float64),
        np.array(count, dtype=np.int64),
        max_depth,
    )


def fit_gbt(X, y, config: Optional[GbtConfig] = None, feature_schema: Optional[Sequence[str]] = None) -> GbtModel:
    config = config or GbtConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("training table must be a nonempty 2-D array")
    if len(y) != len(X):
        raise ValueError(f"{len(X)} rows but {len(y)} targets")
    if config.rounds < 1:
        raise ValueError("rounds must be >= 1")
    if not 0.0 < config.shrinkage <= 1.0:
        raise ValueError("shrinkage must be in (0, 1]")
    schema = tuple(feature_schema) if feature_schema is not None else tuple(f"f{i}" for i in range(X.shape[1]))
    if len(schema) != X.shape[1]:
        raise ValueError(f"schema has {len(schema)} names for width {X.shape[1]}")
    if not np.isfinite(X).all():
        raise ValueError("feature table contains non-finite values")
    base = float(y.mean())
    pred = np.full(len(y), base)
    model = GbtModel(base, [], config.shrinkage, schema, [float(np.mean((y - pred) ** 2))])
    sorted_rows = presort(X)
    for _ in range(config.rounds):
        tree = fit_tree(X, y - pred, config.max_depth, config.min_leaf, config.reg_lambda, sorted_rows)
        pred = pred + config.shrinkage * tree.predict(X)
        model.trees.append(tree)
        model.mse_history.append(float(np.mean((y - pred) ** 2)))
    return model


def predict_gbt(model: GbtModel, v) -> float:
    """Ensemble output for one feature vector (not clamped)."""
    values = getattr(v, "values", v)
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or len(x) != len(model.feature_schema):
        raise ValueError(f"expected width {len(model.feature_schema)}, got {x.shape}")
    return float(model.predict_table(x[None, :])[0])


def feature_importance(model: GbtModel) -> dict[str, float]:
    """Total split gain per feature slot."""
    totals = np.zeros(len(model.feature_schema))
    for tree in model.trees:
        inner = tree.feature >= 0
        np.add.at(totals, tree.feature[inner], tree.gain[inner])
    return dict(zip(model.feature_schema, totals.tolist()))
