import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from netflixrec.dataset import SparseRatingMatrix
from netflixrec.features import (
    FeatureBuilder,
    base_slot_names,
    build_training_table,
    compute_aggregates,
    feature_vector,
    read_table,
    stack_predictions,
    stack_table,
    write_table,
)
from netflixrec.predictors import fit_baseline, fit_global_mean
from netflixrec.stacking import BatchMemo

from conftest import rating_matrices

feature_kinds = st.sampled_from(["similarity", "rating"])


def test_slot_names():
    assert base_slot_names() == ("GAvg", "UAvg", "MAvg", "susr1", "susr2", "susr3", "susr4", "susr5",
                                 "smvr1", "smvr2", "smvr3", "smvr4", "smvr5")
    assert len(base_slot_names(2)) == 7


@given(rating_matrices(), st.integers(1, 6), feature_kinds, st.integers(1, 2), st.data())
def test_vector_matches_brute_force(m, k, kind, min_support, data):
    R = oracles.dense(m)
    builder = FeatureBuilder(m, compute_aggregates(m), k, kind, min_support)
    u = data.draw(st.integers(-1, m.n_users))
    j = data.draw(st.integers(-1, m.n_movies))
    values, padded = builder.values(u, j)
    want = oracles.feature_row(R, u, j, k, kind, min_support)
    assert np.allclose(values, want, rtol=0, atol=1e-12)
    assert len(values) == 3 + 2 * k


@given(rating_matrices(), st.integers(1, 6), feature_kinds, st.integers(1, 2), st.data())
def test_held_out_vector_matches_rebuilt_matrix(m, k, kind, min_support, data):
    """Held-out features equal features built on the matrix without r_uj, global mean aside."""
    e = data.draw(st.integers(0, m.nnz - 1))
    u, j = int(m.entry_users[e]), int(m.user_movies[e])
    R = oracles.dense(m)
    g = oracles.mean([r for row in R for r in row if r is not None])
    builder = FeatureBuilder(m, compute_aggregates(m), k, kind, min_support)
    values, _ = builder.values(u, j, exclude_own=True)
    want = oracles.feature_row(oracles.without(R, u, j), u, j, k, kind, min_support, g=g)
    assert np.allclose(values, want, rtol=0, atol=1e-12)


def test_held_out_requires_observed_pair():
    m = SparseRatingMatrix(2, 2, [0, 1], [0, 1], [1.0, 2.0])
    with pytest.raises(KeyError):
        FeatureBuilder(m, compute_aggregates(m)).values(0, 1, exclude_own=True)


def test_hand_example_and_padding():
    # user 0: (m0=4, m1=2); user 1: (m0=4); user 2: (m1=5)
    m = SparseRatingMatrix(3, 2, [0, 0, 1, 2], [0, 1, 0, 1], [4.0, 2.0, 4.0, 5.0])
    agg = compute_aggregates(m)
    v = feature_vector(0, 1, m, agg, k=2)
    assert v.values[:3].tolist() == [3.75, 3.0, 3.5]
    # only user 2 rated movie 1: cos((4,2),(0,5)) = 10 / (sqrt(20) * 5)
    assert v.values[3] == pytest.approx(10 / (np.sqrt(20) * 5))
    assert v.values[4] == 0.0
    # movie 0 is the only other movie user 0 rated: cos((4,4,0),(2,0,5))
    assert v.values[5] == pytest.approx(8 / (np.sqrt(32) * np.sqrt(29)))
    assert v.values[6] == 0.0
    r = FeatureBuilder(m, agg, k=2, neighbor_feature="rating").vector(0, 1)
    assert r.values[3:].tolist() == [5.0, 3.5, 4.0, 3.5]
    assert r.padded == 2
    cold = feature_vector(-1, 7, m, agg, k=2)
    assert cold.values.tolist() == [3.75] * 3 + [0.0] * 4
    assert cold.padded == 4


def test_bad_neighbor_feature():
    m = SparseRatingMatrix(1, 1, [0], [0], [3.0])
    with pytest.raises(ValueError):
        FeatureBuilder(m, compute_aggregates(m), neighbor_feature="score")


@given(rating_matrices(max_users=20, max_movies=10), st.integers(0, 5))
def test_training_table_sampling(m, seed):
    agg = compute_aggregates(m)
    full = build_training_table(m, agg, leave_one_out=False)
    assert len(full) == m.nnz
    assert np.array_equal(full.targets, m.user_ratings)
    n = max(1, m.nnz // 2)
    a = build_training_table(m, agg, n, seed)
    b = build_training_table(m, agg, n, seed)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.users, b.users)
    assert len(set(zip(a.users.tolist(), a.movies.tolist()))) == n
    with pytest.raises(ValueError):
        build_training_table(m, agg, m.nnz + 1)


def test_stacking_appends_predictions_in_order():
    m = SparseRatingMatrix(3, 3, [0, 0, 1, 2, 2], [0, 1, 1, 0, 2], [5.0, 3.0, 4.0, 1.0, 2.0])
    agg = compute_aggregates(m)
    builder = FeatureBuilder(m, agg)
    preds = [fit_baseline(m), fit_global_mean(m)]
    table = builder.table([0, 1, -1], [2, 0, 1])
    stacked = stack_table(table, preds)
    assert stacked.names == table.names + ("baseline", "global-mean")
    for i, (u, j) in enumerate([(0, 2), (1, 0), (-1, 1)]):
        single = stack_predictions(builder.vector(u, j), preds, u, j)
        assert np.array_equal(stacked.X[i], single.values)
        assert stacked.X[i, -2] == preds[0].predict(u, j).value
    memo = BatchMemo()
    once = stack_table(table, preds, memo)
    twice = stack_table(table, preds, memo)
    assert np.array_equal(once.X, stacked.X) and np.array_equal(twice.X, stacked.X)
    assert len(memo) == 2


def test_table_csv_roundtrip(tmp_path):
    m = SparseRatingMatrix(3, 3, [0, 0, 1, 2, 2], [0, 1, 1, 0, 2], [5.0, 3.0, 4.0, 1.0, 2.0])
    table = build_training_table(m, compute_aggregates(m))
    p = tmp_path / "t.csv"
    write_table(table, p)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("# schema: user,movie,GAvg")
    assert lines[1] == "user,movie," + ",".join(table.names) + ",target"
    back = read_table(p)
    assert back.names == table.names
    assert np.array_equal(back.X, table.X)
    assert np.array_equal(back.targets, table.targets)
    no_target = FeatureBuilder(m, compute_aggregates(m)).table([0], [2])
    write_table(no_target, p)
    assert read_table(p).targets is None
