import numpy as np
import pytest

from netflixrec.dataset import build_matrix
from netflixrec.features import FeatureBuilder, compute_aggregates
from netflixrec.gbt import GbtConfig, fit_gbt
from netflixrec.modelio import dumps, load_model, loads, save_model
from netflixrec.predictors import KnnConfig, MfConfig, fit_baseline, fit_global_mean, fit_knn, fit_mf
from netflixrec.stacking import fit_stacked
from netflixrec.synthetic import make_synthetic


@pytest.fixture(scope="module")
def matrix():
    return build_matrix(make_synthetic(60, 25, seed=4, density=0.3))


def probe(m):
    rng = np.random.default_rng(0)
    return rng.integers(-2, m.n_users + 2, 200), rng.integers(-2, m.n_movies + 2, 200)


def models(m):
    base = fit_baseline(m)
    knn = fit_knn(m, KnnConfig(k=5))
    svd = fit_mf(m, MfConfig(factors=4, epochs=3))
    builder = FeatureBuilder(m, compute_aggregates(m))
    gbt = GbtConfig(rounds=5, max_depth=2)
    return [
        fit_global_mean(m), base, knn, fit_knn(m, KnnConfig(k=5, orientation="movie")), svd,
        fit_mf(m, MfConfig(factors=3, epochs=2, implicit=True)),
        fit_stacked(builder, [], gbt, label="gbt13"),
        fit_stacked(builder, [base, knn, svd], gbt, use_features=False, label="gbt-stack-preds"),
    ]


def test_every_model_roundtrips(matrix, tmp_path):
    users, movies = probe(matrix)
    for i, model in enumerate(models(matrix)):
        path = tmp_path / f"m{i}.nfrm"
        save_model(model, path)
        assert path.read_bytes()[:4] == b"NFRM"
        back = load_model(path, matrix)
        assert type(back) is type(model)
        assert back.name == model.name
        a = model.predict_batch(users, movies)
        b = back.predict_batch(users, movies)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
        # serialization is deterministic
        assert dumps(back) == dumps(model)


def test_plain_gbt_roundtrip():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 3))
    model = fit_gbt(X, rng.normal(size=40), GbtConfig(rounds=4), ("a", "b", "c"))
    back = loads(dumps(model))
    assert back.feature_schema == ("a", "b", "c")
    assert np.array_equal(back.predict_table(X), model.predict_table(X))


def test_load_errors(matrix):
    knn = fit_knn(matrix, KnnConfig(k=3))
    data = dumps(knn)
    with pytest.raises(ValueError, match="training matrix"):
        loads(data)
    small = build_matrix(make_synthetic(10, 5, seed=0))
    with pytest.raises(ValueError, match="shape"):
        loads(data, small)
    with pytest.raises(ValueError, match="magic"):
        loads(b"XXXX" + data[4:])
    with pytest.raises(TypeError):
        dumps(object())
