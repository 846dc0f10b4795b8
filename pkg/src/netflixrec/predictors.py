"""Rating predictors: bias baseline, KNN-baseline and matrix factorization.

Every model predicts on dense *training* indices. An index of -1 (or one out
of range) marks a user or movie the model never saw; predictions then fall
back to whatever biases are known, down to the global mean.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from numba import njit

from .dataset import SparseRatingMatrix
from .similarity import NeighborCache, pearson_baseline_scores, select_top_k

_log = logging.getLogger(__name__)

RATING_MIN, RATING_MAX = 1.0, 5.0
FALLBACK_LEVELS = ("full", "user_only", "movie_only", "global")
FULL, USER_ONLY, MOVIE_ONLY, GLOBAL = range(4)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class Prediction:
    user: int
    movie: int
    value: float
    was_clamped: bool
    fallback_level: str
    neighborhood_fallback: bool = False


def clamp(values):
    return np.clip(values, RATING_MIN, RATING_MAX)


def known_mask(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    return (idx >= 0) & (idx < n)


def fallback_levels(users, movies, n_users: int, n_movies: int) -> np.ndarray:
    ku = known_mask(users, n_users)
    km = known_mask(movies, n_movies)
    return np.where(ku & km, FULL, np.where(ku, USER_ONLY, np.where(km, MOVIE_ONLY, GLOBAL))).astype(np.int8)


class Predictor:
    """Shared single-pair wrapper around ``predict_batch``."""

    name = "predictor"

    def raw_batch(self, users: np.ndarray, movies: np.ndarray):
        """Unclamped estimates and per-row model-fallback flags.

        The flag marks rows where the model could not use its own signal
        (empty KNN neighbourhood, padded stacking features).
        """
        raise NotImplementedError

    def predict_batch(self, users, movies):
        """Clamped values, clamp flags, fallback level codes and model-fallback flags."""
        users = np.asarray(users, dtype=np.int64)
        movies = np.asarray(movies, dtype=np.int64)
        raw, model_fallback = self.raw_batch(users, movies)
        values = clamp(raw)
        return values, values != raw, fallback_levels(users, movies, self.n_users, self.n_movies), model_fallback

    def predict(self, u: int, j: int) -> Prediction:
        users = np.array([u], dtype=np.int64)
        movies = np.array([j], dtype=np.int64)
        raw, nb = self.raw_batch(users, movies)
        value = float(clamp(raw[0]))
        level = int(fallback_levels(users, movies, self.n_users, self.n_movies)[0])
        return Prediction(u, j, value, value != float(raw[0]), FALLBACK_LEVELS[level], bool(nb[0]))


# --------------------------------------------------------------------------
# global mean and bias baseline


@dataclass
class GlobalMeanModel(Predictor):
    mu: float
    n_users: int = 0
    n_movies: int = 0
    name = "global-mean"

    def raw_batch(self, users, movies):
        return np.full(len(users), self.mu), np.zeros(len(users), dtype=bool)


def fit_global_mean(matrix: SparseRatingMatrix) -> GlobalMeanModel:
    if matrix.nnz == 0:
        raise ValueError("cannot fit on an empty matrix")
    return GlobalMeanModel(float(matrix.user_ratings.mean()), matrix.n_users, matrix.n_movies)


@dataclass
class BaselineConfig:
    method: Literal["als", "sgd"] = "als"
    epochs: int = 10
    reg_user: float = 15.0
    reg_movie: float = 10.0
    lr: float = 0.005
    seed: int = 0


@dataclass
class BaselineModel(Predictor):
    mu: float
    b_user: np.ndarray
    b_movie: np.ndarray
    name = "baseline"

    @property
    def n_users(self) -> int:
        return len(self.b_user)

    @property
    def n_movies(self) -> int:
        return len(self.b_movie)

    def estimate(self, users, movies) -> np.ndarray:
        """Unclamped ``mu + b_user + b_movie``; unknown ids contribute 0."""
        users = np.asarray(users, dtype=np.int64)
        movies = np.asarray(movies, dtype=np.int64)
        ku = known_mask(users, self.n_users)
        km = known_mask(movies, self.n_movies)
        bu = np.where(ku, self.b_user[np.where(ku, users, 0)] if self.n_users else 0.0, 0.0)
        bm = np.where(km, self.b_movie[np.where(km, movies, 0)] if self.n_movies else 0.0, 0.0)
        return self.mu + bu + bm

    def raw_batch(self, users, movies):
        return self.estimate(users, movies), np.zeros(len(users), dtype=bool)


@njit(nogil=True, cache=True)
def _baseline_sgd_epoch(users, movies, ratings, perm, mu, bu, bm, lr, reg_u, reg_m):
    for t in range(perm.shape[0]):
        k = perm[t]
        u = users[k]
        i = movies[k]
        err = ratings[k] - (mu + bu[u] + bm[i])
        bu[u] += lr * (err - reg_u * bu[u])
        bm[i] += lr * (err - reg_m * bm[i])


def fit_baseline(matrix: SparseRatingMatrix, config: Optional[BaselineConfig] = None) -> BaselineModel:
    """Fit ``mu + b_user + b_movie`` by regularized least squares.

    ``als`` alternates closed-form movie then user updates; ``sgd`` takes
    per-rating gradient steps in a seeded shuffled order each epoch.
    """
    config = config or BaselineConfig()
    if matrix.nnz == 0:
        raise ValueError("cannot fit on an empty matrix")
    users = matrix.entry_users.astype(np.int64)
    movies = matrix.user_movies.astype(np.int64)
    r = matrix.user_ratings
    mu = float(r.mean())
    bu = np.zeros(matrix.n_users)
    bm = np.zeros(matrix.n_movies)
    if config.method == "als":
        n_u = matrix.user_counts()
        n_m = matrix.movie_counts()
        for _ in range(config.epochs):
            bm = np.bincount(movies, weights=r - mu - bu[users], minlength=matrix.n_movies) / (config.reg_movie + n_m)
            bu = np.bincount(users, weights=r - mu - bm[movies], minlength=matrix.n_users) / (config.reg_user + n_u)
    elif config.method == "sgd":
        rng = np.random.default_rng(config.seed)
        for _ in range(config.epochs):
            perm = rng.permutation(matrix.nnz)
            _baseline_sgd_epoch(users, movies, r, perm, mu, bu, bm, config.lr, config.reg_user, config.reg_movie)
            if not (np.isfinite(bu).all() and np.isfinite(bm).all()):
                raise TrainingDiverged("baseline SGD produced non-finite biases; lower lr")
    else:
        raise ValueError(f"unknown baseline method {config.method!r}")
    return BaselineModel(mu, bu, bm)


def predict_baseline(model: BaselineModel, u: int, j: int) -> Prediction:
    return model.predict(u, j)


# --------------------------------------------------------------------------
# KNN-baseline


@dataclass
class KnnConfig:
    k: int = 40
    shrinkage: float = 100.0
    orientation: Literal["user", "movie"] = "user"
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    cache_size: int = 4096


@dataclass
class KnnModel(Predictor):
    """Baseline corrected by a similarity-weighted mean of neighbour residuals.

    The estimate for (u, j) is ``b_uj + sum(sim * (r - b)) / sum(sim)`` over the
    ``k`` most similar neighbours of u that rated j (movie orientation: the
    most similar movies to j that u rated). Only positively similar
    neighbours qualify, so the weights form a proper weighted mean; an empty
    neighbourhood falls back to ``b_uj``.
    """

    matrix: SparseRatingMatrix
    baselines: BaselineModel
    k: int = 40
    shrinkage: float = 100.0
    orientation: str = "user"
    cache: Optional[NeighborCache] = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.cache is None:
            self.cache = NeighborCache(4096)

    @property
    def name(self) -> str:
        return f"knn-{self.orientation}"

    @property
    def n_users(self) -> int:
        return self.matrix.n_users

    @property
    def n_movies(self) -> int:
        return self.matrix.n_movies

    def similarities(self, anchor: int) -> np.ndarray:
        key = ("pearson", self.orientation, self.shrinkage, anchor)
        return self.cache.get(
            key,
            lambda: pearson_baseline_scores(anchor, self.matrix, self.baselines, self.shrinkage, self.orientation),
        )

    def neighbors(self, u: int, j: int):
        """(neighbour ids, similarities, neighbour ratings, neighbour baselines)."""
        if self.orientation == "user":
            anchor, cand, vals = u, *self.matrix.by_movie(j)
        else:
            anchor, cand, vals = j, *self.matrix.by_user(u)
        keep = cand != anchor
        cand = cand[keep].astype(np.int64)
        vals = vals[keep]
        sims = self.similarities(anchor)[cand]
        positive = sims > 0
        ids, sc = select_top_k(cand[positive], sims[positive], self.k)
        pos = np.searchsorted(cand, ids)
        if self.orientation == "user":
            base = self.baselines.estimate(ids, np.full(len(ids), j))
        else:
            base = self.baselines.estimate(np.full(len(ids), u), ids)
        return ids, sc, vals[pos], base

    def raw_batch(self, users, movies):
        base = self.baselines.estimate(users, movies)
        out = base.copy()
        fell_back = np.ones(len(users), dtype=bool)
        ok = known_mask(users, self.n_users) & known_mask(movies, self.n_movies)
        rows = np.flatnonzero(ok)
        # group rows by anchor so each anchor's similarity vector is computed once
        anchors = users[rows] if self.orientation == "user" else movies[rows]
        for r in rows[np.argsort(anchors, kind="stable")]:
            _, sims, vals, nb = self.neighbors(int(users[r]), int(movies[r]))
            total = sims.sum()
            if len(sims) and total > 0:
                out[r] = base[r] + np.dot(sims, vals - nb) / total
                fell_back[r] = False
        return out, fell_back


def fit_knn(matrix: SparseRatingMatrix, config: Optional[KnnConfig] = None) -> KnnModel:
    config = config or KnnConfig()
    baselines = fit_baseline(matrix, config.baseline)
    return KnnModel(matrix, baselines, config.k, config.shrinkage, config.orientation, NeighborCache(config.cache_size))


def predict_knn(model: KnnModel, u: int, j: int) -> Prediction:
    return model.predict(u, j)


# --------------------------------------------------------------------------
# matrix factorization


@dataclass
class MfConfig:
    factors: int = 100
    epochs: int = 20
    lr: float = 0.005
    reg: float = 0.02
    init_std: float = 0.1
    implicit: bool = False
    seed: int = 0


@dataclass
class MfModel(Predictor):
    """Biased matrix factorization, optionally with implicit feedback.

    Estimate: ``mu + b_u + b_i + q_i . (p_u + |N(u)|^-1/2 sum_{j in N(u)} y_j)``
    where N(u) are the movies u rated in training. ``y_sum`` caches the
    bracketed implicit term per user.
    """

    mu: float
    b_user: np.ndarray
    b_movie: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    Y: Optional[np.ndarray] = None
    y_sum: Optional[np.ndarray] = None
    loss_history: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return "svdpp" if self.Y is not None else "svd"

    @property
    def factors(self) -> int:
        return self.P.shape[1]

    @property
    def n_users(self) -> int:
        return len(self.b_user)

    @property
    def n_movies(self) -> int:
        return len(self.b_movie)

    def raw_batch(self, users, movies):
        ku = known_mask(users, self.n_users)
        km = known_mask(movies, self.n_movies)
        uu = np.where(ku, users, 0)
        mm = np.where(km, movies, 0)
        out = np.full(len(users), self.mu)
        if self.n_users:
            out += np.where(ku, self.b_user[uu], 0.0)
        if self.n_movies:
            out += np.where(km, self.b_movie[mm], 0.0)
        both = ku & km
        if both.any() and self.factors:
            pu = self.P[uu[both]]
            if self.y_sum is not None:
                pu = pu + self.y_sum[uu[both]]
            out[both] += np.einsum("ij,ij->i", self.Q[mm[both]], pu)
        return out, np.zeros(len(users), dtype=bool)


@njit(nogil=True, cache=True)
def _mf_sgd_epoch(users, movies, ratings, perm, mu, bu, bm, P, Q, lr, reg):
    f = P.shape[1]
    for t in range(perm.shape[0]):
        k = perm[t]
        u = users[k]
        i = movies[k]
        dot = 0.0
        for c in range(f):
            dot += Q[i, c] * P[u, c]
        err = ratings[k] - (mu + bu[u] + bm[i] + dot)
        bu[u] += lr * (err - reg * bu[u])
        bm[i] += lr * (err - reg * bm[i])
        for c in range(f):
            pu = P[u, c]
            qi = Q[i, c]
            P[u, c] += lr * (err * qi - reg * pu)
            Q[i, c] += lr * (err * pu - reg * qi)


@njit(nogil=True, cache=True)
def _svdpp_sgd_epoch(users, movies, ratings, perm, user_ptr, user_movies, mu, bu, bm, P, Q, Y, lr, reg):
    f = P.shape[1]
    imp = np.zeros(f)
    qold = np.zeros(f)
    for t in range(perm.shape[0]):
        k = perm[t]
        u = users[k]
        i = movies[k]
        s, e = user_ptr[u], user_ptr[u + 1]
        scale = 1.0 / np.sqrt(e - s)
        for c in range(f):
            imp[c] = 0.0
        for jj in range(s, e):
            j = user_movies[jj]
            for c in range(f):
                imp[c] += Y[j, c]
        dot = 0.0
        for c in range(f):
            imp[c] *= scale
            dot += Q[i, c] * (P[u, c] + imp[c])
        err = ratings[k] - (mu + bu[u] + bm[i] + dot)
        bu[u] += lr * (err - reg * bu[u])
        bm[i] += lr * (err - reg * bm[i])
        for c in range(f):
            pu = P[u, c]
            qi = Q[i, c]
            qold[c] = qi
            P[u, c] += lr * (err * qi - reg * pu)
            Q[i, c] += lr * (err * (pu + imp[c]) - reg * qi)
        for jj in range(s, e):
            j = user_movies[jj]
            for c in range(f):
                Y[j, c] += lr * (err * scale * qold[c] - reg * Y[j, c])


def implicit_sums(matrix: SparseRatingMatrix, Y: np.ndarray) -> np.ndarray:
    """``|N(u)|^-1/2 * sum_{j in N(u)} y_j`` for every user."""
    out = np.zeros((matrix.n_users, Y.shape[1]))
    np.add.at(out, matrix.entry_users, Y[matrix.user_movies])
    counts = matrix.user_counts()
    scale = np.divide(1.0, np.sqrt(counts), out=np.zeros(len(counts)), where=counts > 0)
    return out * scale[:, None]


def fit_mf(matrix: SparseRatingMatrix, config: Optional[MfConfig] = None) -> MfModel:
    """SGD on observed ratings; one seeded permutation per epoch.

    ``loss_history`` holds the training MSE measured after each epoch.
    """
    config = config or MfConfig()
    if matrix.nnz == 0:
        raise ValueError("cannot fit on an empty matrix")
    if config.factors < 0 or config.epochs < 1:
        raise ValueError("factors must be >= 0 and epochs >= 1")
    rng = np.random.default_rng(config.seed)
    f = config.factors
    users = matrix.entry_users.astype(np.int64)
    movies = matrix.user_movies.astype(np.int64)
    r = matrix.user_ratings
    mu = float(r.mean())
    bu = np.zeros(matrix.n_users)
    bm = np.zeros(matrix.n_movies)
    P = rng.normal(0.0, config.init_std, size=(matrix.n_users, f))
    Q = rng.normal(0.0, config.init_std, size=(matrix.n_movies, f))
    Y = rng.normal(0.0, config.init_std, size=(matrix.n_movies, f)) if config.implicit else None
    model = MfModel(mu, bu, bm, P, Q, Y)
    for epoch in range(config.epochs):
        perm = rng.permutation(matrix.nnz)
        if config.implicit:
            _svdpp_sgd_epoch(users, movies, r, perm, matrix.user_ptr, matrix.user_movies.astype(np.int64),
                             mu, bu, bm, P, Q, Y, config.lr, config.reg)
            model.y_sum = implicit_sums(matrix, Y)
        else:
            _mf_sgd_epoch(users, movies, r, perm, mu, bu, bm, P, Q, config.lr, config.reg)
        with np.errstate(over="ignore", invalid="ignore"):
            raw, _ = model.raw_batch(users, movies)
            loss = float(np.mean((r - raw) ** 2))
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"{model.name}: non-finite training loss at epoch {epoch + 1} "
                f"(lr={config.lr}, reg={config.reg}, factors={f})"
            )
        model.loss_history.append(loss)
        _log.debug("%s epoch %d mse %.6f", model.name, epoch + 1, loss)
    return model


def predict_mf(model: MfModel, u: int, j: int) -> Prediction:
    return model.predict(u, j)


# --------------------------------------------------------------------------
# objective and analytic gradient (used for verification)


def mf_objective(params: dict, matrix: SparseRatingMatrix, reg: float) -> float:
    """Sum over observed ratings of ``0.5 * (err^2 + reg * ||touched params||^2)``.

    This is the loss whose per-rating gradient the SGD kernels follow. Pass
    ``params["Y"]`` for the implicit variant.
    """
    users = matrix.entry_users.astype(np.int64)
    movies = matrix.user_movies.astype(np.int64)
    mu, bu, bm, P, Q = (params[k] for k in ("mu", "b_user", "b_movie", "P", "Q"))
    Y = params.get("Y")
    pu = P[users]
    reg_terms = bu[users] ** 2 + bm[movies] ** 2 + (pu**2).sum(1) + (Q[movies] ** 2).sum(1)
    if Y is not None:
        pu = pu + implicit_sums(matrix, Y)[users]
        ysq = np.bincount(matrix.entry_users, weights=(Y[movies] ** 2).sum(1), minlength=matrix.n_users)
        reg_terms = reg_terms + ysq[users]
    err = matrix.user_ratings - (mu + bu[users] + bm[movies] + (Q[movies] * pu).sum(1))
    return float(0.5 * np.sum(err**2 + reg * reg_terms))


def mf_gradient(params: dict, matrix: SparseRatingMatrix, reg: float) -> dict:
    """Analytic gradient of :func:`mf_objective` w.r.t. biases and factors."""
    users = matrix.entry_users.astype(np.int64)
    movies = matrix.user_movies.astype(np.int64)
    mu, bu, bm, P, Q = (params[k] for k in ("mu", "b_user", "b_movie", "P", "Q"))
    Y = params.get("Y")
    pu_eff = P[users]
    if Y is not None:
        pu_eff = pu_eff + implicit_sums(matrix, Y)[users]
    err = matrix.user_ratings - (mu + bu[users] + bm[movies] + (Q[movies] * pu_eff).sum(1))
    g = {
        "b_user": np.bincount(users, weights=-err + reg * bu[users], minlength=len(bu)),
        "b_movie": np.bincount(movies, weights=-err + reg * bm[movies], minlength=len(bm)),
        "P": np.zeros_like(P),
        "Q": np.zeros_like(Q),
    }
    np.add.at(g["P"], users, -err[:, None] * Q[movies] + reg * P[users])
    np.add.at(g["Q"], movies, -err[:, None] * pu_eff + reg * Q[movies])
    if Y is not None:
        counts = matrix.user_counts().astype(np.float64)
        scale = np.divide(1.0, np.sqrt(counts), out=np.zeros(len(counts)), where=counts > 0)
        eq = np.zeros_like(P)
        np.add.at(eq, users, err[:, None] * Q[movies])
        # each rating of u touches every y_j with j in N(u)
        per_entry = -scale[users, None] * eq[users] + reg * counts[users, None] * Y[movies]
        g["Y"] = np.zeros_like(Y)
        np.add.at(g["Y"], movies, per_entry)
    return g
