import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from netflixrec.gbt import GbtConfig, best_split, feature_importance, fit_gbt, fit_tree, predict_gbt


@st.composite
def integer_tables(draw, max_rows=40, max_cols=5):
    """Small-integer X and residuals: every gain is computed exactly alike by any summation order."""
    n = draw(st.integers(1, max_rows))
    d = draw(st.integers(1, max_cols))
    seed = draw(st.integers(0, 2**32 - 1))
    spread = draw(st.sampled_from([2, 4, 10, 1000]))
    rng = np.random.default_rng(seed)
    X = rng.integers(0, spread, (n, d)).astype(float)
    resid = rng.integers(-20, 21, n).astype(float)
    return X, resid


@given(integer_tables(), st.integers(1, 4), st.sampled_from([0.0, 1.0, 3.0]))
def test_best_split_equals_exhaustive_search(table, min_leaf, lam):
    X, resid = table
    split = best_split(X, resid, np.arange(len(X)), min_leaf, lam)
    want = oracles.best_split(X.tolist(), resid.tolist(), min_leaf, lam)
    if want is None:
        assert split is None
        return
    assert (split.feature, split.threshold) == want[:2]
    assert split.gain == pytest.approx(want[2], rel=1e-12, abs=1e-12)
    assert np.array_equal(split.left, np.flatnonzero(X[:, split.feature] <= split.threshold))
    assert len(split.left) >= min_leaf and len(split.right) >= min_leaf


@given(st.integers(0, 2**32 - 1), st.integers(2, 60))
def test_best_split_is_optimal_on_real_valued_data(seed, n):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    resid = rng.normal(size=n)
    split = best_split(X, resid, np.arange(n), 1, 1.0)
    want = oracles.best_split(X.tolist(), resid.tolist(), 1, 1.0)
    assert (want is None) == (split is None)
    if want is not None:
        assert split.gain == pytest.approx(want[2], rel=1e-9)


def test_subset_rows_and_presorted_order_do_not_change_the_split():
    rng = np.random.default_rng(1)
    X = rng.integers(0, 5, (30, 3)).astype(float)
    resid = rng.integers(-5, 6, 30).astype(float)
    rows = np.array([1, 4, 5, 9, 12, 17, 22, 28])
    split = best_split(X, resid, rows, 1, 1.0)
    want = oracles.best_split(X[rows].tolist(), resid[rows].tolist(), 1, 1.0)
    assert (split.feature, split.threshold) == want[:2]
    assert set(split.left) | set(split.right) == set(rows)


def test_tie_break_lowest_feature_then_threshold():
    # columns 0 and 1 are identical; both thresholds of column 0 give the same gain
    X = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    resid = np.array([1.0, 0.0, -1.0])
    split = best_split(X, resid, np.arange(3), 1, 0.0)
    assert split.feature == 0 and split.threshold == 0.5


def test_no_split_when_nothing_to_gain():
    X = np.array([[1.0], [1.0], [1.0]])
    assert best_split(X, np.array([1.0, -1.0, 0.0]), np.arange(3), 1, 1.0) is None
    assert best_split(np.array([[0.0], [1.0]]), np.zeros(2), np.arange(2), 1, 1.0) is None
    assert best_split(np.array([[0.0], [1.0]]), np.ones(2), np.arange(2), 2, 1.0) is None


def naive_tree(X, resid, rows, depth, max_depth, min_leaf, lam):
    """Recursive builder on top of the exhaustive split oracle; returns a predictor."""
    leaf = sum(resid[i] for i in rows) / (len(rows) + lam)
    if depth == max_depth or len(rows) < 2 * min_leaf:
        return lambda x: leaf
    found = oracles.best_split([X[i] for i in rows], [resid[i] for i in rows], min_leaf, lam)
    if found is None:
        return lambda x: leaf
    f, thr, _ = found
    left = naive_tree(X, resid, [i for i in rows if X[i][f] <= thr], depth + 1, max_depth, min_leaf, lam)
    right = naive_tree(X, resid, [i for i in rows if X[i][f] > thr], depth + 1, max_depth, min_leaf, lam)
    return lambda x: left(x) if x[f] <= thr else right(x)


@given(integer_tables(max_rows=30, max_cols=3), st.integers(0, 3), st.integers(1, 3), st.sampled_from([0.0, 1.0]))
def test_tree_equals_naive_recursive_builder(table, max_depth, min_leaf, lam):
    X, resid = table
    tree = fit_tree(X, resid, max_depth, min_leaf, lam)
    naive = naive_tree(X.tolist(), resid.tolist(), list(range(len(X))), 0, max_depth, min_leaf, lam)
    got = tree.predict(X)
    for i, x in enumerate(X.tolist()):
        assert got[i] == pytest.approx(naive(x), rel=1e-12, abs=1e-12)
        assert got[i] == oracles.tree_walk(tree, x)
    assert tree.depth() <= max_depth
    leaves = tree.feature < 0
    assert np.all(tree.n_samples[leaves] >= min(min_leaf, len(X)))


@given(st.integers(0, 2**32 - 1), st.integers(1, 80), st.integers(1, 4), st.sampled_from([0.05, 0.3, 1.0]),
       st.sampled_from([0.0, 1.0, 10.0]), st.integers(1, 5))
def test_training_mse_never_increases(seed, n, depth, shrinkage, lam, min_leaf):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4))
    y = rng.integers(1, 6, n).astype(float)
    model = fit_gbt(X, y, GbtConfig(rounds=15, max_depth=depth, shrinkage=shrinkage, reg_lambda=lam,
                                    min_leaf=min_leaf))
    h = model.mse_history
    assert len(h) == 16
    assert all(b <= a for a, b in zip(h, h[1:]))


def test_single_stump_fits_a_step_exactly():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([1.0, 1.0, 4.0, 4.0])
    model = fit_gbt(X, y, GbtConfig(rounds=1, max_depth=1, shrinkage=1.0, reg_lambda=0.0))
    assert model.trees[0].threshold[0] == 1.5
    assert model.predict_table(X).tolist() == y.tolist()
    assert model.mse_history[-1] == 0.0


def test_learns_identity_of_first_feature():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 5, (400, 3))
    y = X[:, 0].copy()
    model = fit_gbt(X, y, GbtConfig(rounds=200, max_depth=3, shrinkage=0.3, reg_lambda=0.0))
    assert model.mse_history[-1] < 1e-3
    imp = feature_importance(model)
    assert imp["f0"] > 100 * (imp["f1"] + imp["f2"])


def test_importance_replays_split_gains():
    rng = np.random.default_rng(3)
    X = rng.integers(0, 6, (60, 3)).astype(float)
    y = rng.integers(1, 6, 60).astype(float)
    cfg = GbtConfig(rounds=5, max_depth=2, shrinkage=0.5, reg_lambda=1.0)
    model = fit_gbt(X, y, cfg, ("a", "b", "c"))
    totals = {"a": 0.0, "b": 0.0, "c": 0.0}
    pred = np.full(len(y), y.mean())
    for tree in model.trees:
        resid = y - pred
        stack = [(0, np.arange(len(y)))]
        while stack:
            node, rows = stack.pop()
            f = tree.feature[node]
            if f < 0:
                continue
            found = oracles.best_split(X[rows].tolist(), resid[rows].tolist(), cfg.min_leaf, cfg.reg_lambda)
            assert found[:2] == (f, tree.threshold[node])
            totals["abc"[f]] += found[2]
            go = X[rows, f] <= tree.threshold[node]
            stack += [(tree.left[node], rows[go]), (tree.right[node], rows[~go])]
        pred = pred + cfg.shrinkage * tree.predict(X)
    imp = feature_importance(model)
    for key in totals:
        assert imp[key] == pytest.approx(totals[key], rel=1e-9, abs=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_vector_prediction_matches_tree_walk(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(50, 4))
    y = rng.normal(size=50)
    model = fit_gbt(X, y, GbtConfig(rounds=5, max_depth=3))
    for x in X[:10]:
        assert predict_gbt(model, x) == pytest.approx(oracles.gbt_predict(model, x.tolist()), rel=1e-12, abs=1e-12)


def test_fit_and_predict_validation():
    X = np.zeros((3, 2))
    y = np.zeros(3)
    with pytest.raises(ValueError):
        fit_gbt(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        fit_gbt(X, np.zeros(2))
    with pytest.raises(ValueError):
        fit_gbt(X, y, GbtConfig(rounds=0))
    with pytest.raises(ValueError):
        fit_gbt(X, y, GbtConfig(shrinkage=0.0))
    with pytest.raises(ValueError):
        fit_gbt(np.array([[np.nan, 0.0]] * 3), y)
    with pytest.raises(ValueError):
        fit_gbt(X, y, feature_schema=("only-one",))
    model = fit_gbt(X, y, GbtConfig(rounds=2))
    with pytest.raises(ValueError):
        predict_gbt(model, np.zeros(3))
    with pytest.raises(ValueError):
        model.predict_table(np.zeros((2, 5)))
