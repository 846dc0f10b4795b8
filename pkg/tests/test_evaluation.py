import datetime as dt
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from netflixrec.dataset import RatingStore, RatingTriple, build_matrix
from netflixrec.evaluation import EvalRow, benchmark, evaluate, mape, rmse, sort_rows
from netflixrec.predictors import fit_baseline, fit_global_mean

ratings = st.integers(1, 5).map(float)
predictions = st.floats(1.0, 5.0, allow_nan=False)
pairs = st.lists(st.tuples(ratings, predictions), min_size=1, max_size=200)


@given(pairs)
def test_rmse_and_mape_match_hand_scan(ps):
    assert rmse(ps) == pytest.approx(oracles.rmse(ps), rel=1e-12, abs=1e-12)
    assert mape(ps) == pytest.approx(oracles.mape(ps), rel=1e-12, abs=1e-12)
    assert mape(ps, signed=True) == pytest.approx(oracles.mape(ps, signed=True), rel=1e-12, abs=1e-12)


@given(pairs)
def test_metric_properties(ps):
    assert rmse(ps) >= 0 and mape(ps) >= 0
    assert abs(mape(ps, signed=True)) <= mape(ps) + 1e-12
    exact = [(a, a) for a, _ in ps]
    assert rmse(exact) == 0.0 and mape(exact) == 0.0


def test_metric_examples_and_errors():
    assert rmse([(1.0, 3.0), (5.0, 5.0)]) == pytest.approx(np.sqrt(2))
    # |1-2|/1 and |4-2|/4 -> (100 + 50) / 2
    assert mape([(1.0, 2.0), (4.0, 2.0)]) == pytest.approx(75.0)
    assert mape([(1.0, 2.0), (4.0, 2.0)], signed=True) == pytest.approx(-25.0)
    with pytest.raises(ValueError):
        rmse([])
    with pytest.raises(ValueError):
        mape([(0.0, 1.0)])


def store(rows):
    d = dt.date(2005, 1, 1)
    return RatingStore.from_triples(RatingTriple(u, m, r, d) for u, m, r in rows)


def test_evaluate_stratifies_by_fallback_level():
    train = store([(10, 1, 5), (10, 2, 3), (20, 1, 4)])
    test = store([(10, 1, 4), (20, 2, 2), (10, 9, 3), (99, 1, 5), (99, 9, 1)])
    m = build_matrix(train)
    row = evaluate(fit_baseline(m), test, m)
    assert row.n_evaluated == 5
    assert row.fallback_counts == {"full": 2, "user_only": 1, "movie_only": 1, "global": 1}
    assert row.fallback_rmse["global"] == pytest.approx(abs(1 - 4.0))
    row_store = evaluate(fit_baseline(m), test, train)
    assert row_store.rmse == row.rmse
    assert fit_global_mean(m).predict(0, 0).value == 4.0


def test_benchmark_isolates_failures_and_sorts():
    train = store([(10, 1, 5), (10, 2, 3), (20, 1, 4)])
    test = store([(10, 2, 4), (20, 2, 2)])
    m = build_matrix(train)

    def broken():
        raise RuntimeError("boom")

    specs = [("global-mean", lambda: fit_global_mean(m)), ("broken", broken), ("baseline", lambda: fit_baseline(m))]
    for threads in (1, 3):
        report = benchmark(specs, train, test, threads=threads)
        names = [r.model for r in report.rows]
        assert names[-1] == "broken"
        assert report.failed[0].error == "RuntimeError: boom"
        ok = [r.rmse for r in report.rows if r.ok]
        assert ok == sorted(ok)
        data = json.loads(report.to_json())
        assert data["schema_version"] == 1 and len(data["models"]) == 3
        assert "FAILED: RuntimeError: boom" in report.to_table()


def test_sort_rows_ties_by_name(tmp_path):
    rows = [EvalRow("b", rmse=1.0), EvalRow("a", rmse=1.0), EvalRow("z", error="x"), EvalRow("c", rmse=0.5)]
    assert [r.model for r in sort_rows(rows)] == ["c", "a", "b", "z"]
