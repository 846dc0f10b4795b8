"""Regression features for a (user, movie) pair.

Base layout, 13 slots in this order::

    GAvg, UAvg, MAvg, susr1..susr5, smvr1..smvr5

``susr_i`` describes the i-th most cosine-similar user to u among users who
rated movie j; ``smvr_i`` the i-th most similar movie to j among movies u
rated. With ``neighbor_feature="similarity"`` the slot holds the similarity
itself (missing neighbours pad with 0); with ``"rating"`` it holds that
neighbour's rating (missing neighbours pad with MAvg, or GAvg for an unknown
movie). Stacked predictor outputs are appended after the base slots.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Literal, Optional, Sequence

import numpy as np

from .dataset import SparseRatingMatrix
from .similarity import NeighborCache, top_k_similar_movies, top_k_similar_users, top_k_without_rating

NeighborFeature = Literal["similarity", "rating"]


def base_slot_names(k: int = 5) -> tuple[str, ...]:
    return ("GAvg", "UAvg", "MAvg") + tuple(f"susr{i}" for i in range(1, k + 1)) + tuple(
        f"smvr{i}" for i in range(1, k + 1)
    )


@dataclass(frozen=True)
class AggregateStats:
    g_avg: float
    u_avg: np.ndarray  # NaN for users without ratings
    m_avg: np.ndarray

    def user_avg(self, u: int) -> float:
        if 0 <= u < len(self.u_avg) and np.isfinite(self.u_avg[u]):
            return float(self.u_avg[u])
        return self.g_avg

    def movie_avg(self, j: int) -> float:
        if 0 <= j < len(self.m_avg) and np.isfinite(self.m_avg[j]):
            return float(self.m_avg[j])
        return self.g_avg


def compute_aggregates(matrix: SparseRatingMatrix) -> AggregateStats:
    if matrix.nnz == 0:
        raise ValueError("aggregates of an empty matrix are undefined")
    r = matrix.user_ratings
    su = np.bincount(matrix.entry_users, weights=r, minlength=matrix.n_users)
    sm = np.bincount(matrix.user_movies, weights=r, minlength=matrix.n_movies)
    cu = matrix.user_counts()
    cm = matrix.movie_counts()
    with np.errstate(invalid="ignore", divide="ignore"):
        u_avg = np.where(cu > 0, su / cu, np.nan)
        m_avg = np.where(cm > 0, sm / cm, np.nan)
    return AggregateStats(float(r.mean()), u_avg, m_avg)


@dataclass
class FeatureVector:
    user: int
    movie: int
    values: np.ndarray
    names: tuple
    target: Optional[float] = None
    padded: int = 0

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class FeatureTable:
    """Row-major feature matrix plus the (user, movie, target) of each row."""

    X: np.ndarray
    names: tuple
    users: np.ndarray
    movies: np.ndarray
    targets: Optional[np.ndarray] = None
    padded: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.X)

    def row(self, i: int) -> FeatureVector:
        target = None if self.targets is None else float(self.targets[i])
        padded = 0 if self.padded is None else int(self.padded[i])
        return FeatureVector(int(self.users[i]), int(self.movies[i]), self.X[i], self.names, target, padded)

    def __iter__(self) -> Iterator[FeatureVector]:
        for i in range(len(self)):
            yield self.row(i)

    def with_columns(self, names: Sequence[str], columns: np.ndarray) -> "FeatureTable":
        columns = np.asarray(columns, dtype=np.float64).reshape(len(self), -1)
        return FeatureTable(
            np.hstack([self.X, columns]), self.names + tuple(names), self.users, self.movies, self.targets, self.padded
        )


class FeatureBuilder:
    """Builds feature rows against one training matrix, memoizing neighbour scores."""

    def __init__(
        self,
        matrix: SparseRatingMatrix,
        aggregates: AggregateStats,
        k: int = 5,
        neighbor_feature: NeighborFeature = "similarity",
        min_support: int = 1,
        cache: Optional[NeighborCache] = None,
    ):
        if neighbor_feature not in ("similarity", "rating"):
            raise ValueError(f"neighbor_feature must be 'similarity' or 'rating', got {neighbor_feature!r}")
        self.matrix = matrix
        self.aggregates = aggregates
        self.k = k
        self.neighbor_feature = neighbor_feature
        self.min_support = min_support
        self.cache = cache if cache is not None else NeighborCache(8192)
        self.names = base_slot_names(k)

    @cached_property
    def _sums(self):
        m = self.matrix
        r = m.user_ratings
        return (np.bincount(m.entry_users, weights=r, minlength=m.n_users), m.user_counts(),
                np.bincount(m.user_movies, weights=r, minlength=m.n_movies), m.movie_counts())

    def _held_out_averages(self, u: int, j: int, r: float) -> tuple[float, float]:
        """UAvg and MAvg recomputed with the observed rating r_uj removed.

        GAvg is left alone: ``(total - r) / (n - 1)`` is a function of r
        alone, so a held-out global mean would hand the target to the model.
        """
        su, cu, sm, cm = self._sums
        g = self.aggregates.g_avg
        ua = (su[u] - r) / (cu[u] - 1) if cu[u] > 1 else g
        ma = (sm[j] - r) / (cm[j] - 1) if cm[j] > 1 else g
        return ua, ma

    def values(self, u: int, j: int, exclude_own: bool = False) -> tuple[np.ndarray, int]:
        """Feature values of (u, j) and the number of padded neighbour slots.

        ``exclude_own=True`` builds the user, movie and neighbour slots as if
        the observed rating r_uj were absent from the matrix, so training
        rows do not see their own target.
        """
        m = self.matrix
        agg = self.aggregates
        known_u = 0 <= u < m.n_users
        known_j = 0 <= j < m.n_movies
        out = np.empty(3 + 2 * self.k)
        out[0] = agg.g_avg
        if exclude_own:
            r = m.rating(u, j) if known_u and known_j else None
            if r is None:
                raise KeyError(f"({u}, {j}) is not an observed rating")
            out[1], out[2] = self._held_out_averages(u, j, r)
        else:
            out[1] = agg.user_avg(u)
            out[2] = agg.movie_avg(j)
        pad = 0.0 if self.neighbor_feature == "similarity" else out[2]
        padded = 0

        if not (known_u and known_j):
            users = movies = None
        elif exclude_own:
            users = top_k_without_rating(u, j, m, self.k, "user", self.min_support, self.cache)
            movies = top_k_without_rating(u, j, m, self.k, "movie", self.min_support, self.cache)
        else:
            users = top_k_similar_users(u, m, self.k, j, self.min_support, self.cache)
            movies = top_k_similar_movies(j, m, self.k, u, self.min_support, self.cache)
        for offset, nl, lookup in ((3, users, "user"), (3 + self.k, movies, "movie")):
            slots = np.full(self.k, pad)
            if nl is not None and len(nl):
                if self.neighbor_feature == "similarity":
                    slots[: len(nl)] = nl.scores
                elif lookup == "user":
                    raters, ratings = m.by_movie(j)
                    slots[: len(nl)] = ratings[np.searchsorted(raters, nl.ids)]
                else:
                    rated, ratings = m.by_user(u)
                    slots[: len(nl)] = ratings[np.searchsorted(rated, nl.ids)]
            padded += self.k - (0 if nl is None else len(nl))
            out[offset: offset + self.k] = slots
        return out, padded

    def vector(self, u: int, j: int, target: Optional[float] = None, exclude_own: bool = False) -> FeatureVector:
        values, padded = self.values(u, j, exclude_own)
        return FeatureVector(u, j, values, self.names, target, padded)

    def table(self, users, movies, targets=None, exclude_own: bool = False) -> FeatureTable:
        users = np.asarray(users, dtype=np.int64)
        movies = np.asarray(movies, dtype=np.int64)
        X = np.empty((len(users), len(self.names)))
        padded = np.zeros(len(users), dtype=np.int64)
        for i in range(len(users)):
            X[i], padded[i] = self.values(int(users[i]), int(movies[i]), exclude_own)
        tgt = None if targets is None else np.asarray(targets, dtype=np.float64)
        return FeatureTable(X, self.names, users, movies, tgt, padded)


def feature_vector(
    u: int,
    j: int,
    matrix: SparseRatingMatrix,
    aggregates: AggregateStats,
    k: int = 5,
    neighbor_feature: NeighborFeature = "similarity",
    cache: Optional[NeighborCache] = None,
) -> FeatureVector:
    """Feature vector of one pair; unknown ids are -1 or out of range."""
    return FeatureBuilder(matrix, aggregates, k, neighbor_feature, cache=cache).vector(u, j)


def build_training_table(
    matrix: SparseRatingMatrix,
    aggregates: AggregateStats,
    sample: Optional[int] = None,
    seed: int = 0,
    builder: Optional[FeatureBuilder] = None,
    leave_one_out: bool = True,
) -> FeatureTable:
    """One row per observed rating (or a seeded sample without replacement).

    With ``leave_one_out`` each row is built without its own rating, which
    matches how features look for unseen test pairs.
    """
    if sample is not None and sample > matrix.nnz:
        raise ValueError(f"sample {sample} exceeds {matrix.nnz} observed ratings")
    if sample is None:
        rows = np.arange(matrix.nnz)
    else:
        rows = np.random.default_rng(seed).choice(matrix.nnz, size=sample, replace=False)
    builder = builder or FeatureBuilder(matrix, aggregates)
    return builder.table(matrix.entry_users[rows], matrix.user_movies[rows], matrix.user_ratings[rows], leave_one_out)


def stack_predictions(base: FeatureVector, predictors: Sequence, u: int, j: int) -> FeatureVector:
    """Append each predictor's (clamped) estimate for (u, j), in order."""
    if not predictors:
        return base
    extra = [p.predict(u, j).value for p in predictors]
    names = base.names + tuple(p.name for p in predictors)
    return FeatureVector(base.user, base.movie, np.concatenate([base.values, extra]), names, base.target, base.padded)


def stack_table(table: FeatureTable, predictors: Sequence, memo=None) -> FeatureTable:
    """Batch form of :func:`stack_predictions`.

    ``memo`` (anything with ``get(label, users, movies, compute)``) reuses
    prediction columns across calls, keyed by predictor name.
    """
    if not predictors:
        return table

    def column(p):
        make = lambda: p.predict_batch(table.users, table.movies)[0]
        return make() if memo is None else memo.get(p.name, table.users, table.movies, make)

    cols = np.column_stack([column(p) for p in predictors])
    return table.with_columns([p.name for p in predictors], cols)


def write_table(table: FeatureTable, path) -> None:
    """CSV with a leading ``#`` schema comment and a header naming every slot."""
    with open(path, "w", newline="") as fh:
        fh.write("# schema: user,movie," + ",".join(table.names) + ",target\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "movie", *table.names, "target"])
        targets = table.targets if table.targets is not None else np.full(len(table), np.nan)
        for u, j, x, t in zip(table.users, table.movies, table.X, targets):
            w.writerow([int(u), int(j), *(repr(float(v)) for v in x), "" if np.isnan(t) else repr(float(t))])


def read_table(path) -> FeatureTable:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    names = tuple(header[2:-1])
    rows = list(reader)
    users = np.array([int(r[0]) for r in rows], dtype=np.int64)
    movies = np.array([int(r[1]) for r in rows], dtype=np.int64)
    X = np.array([[float(v) for v in r[2:-1]] for r in rows], dtype=np.float64).reshape(len(rows), len(names))
    targets = np.array([float(r[-1]) if r[-1] else np.nan for r in rows])
    return FeatureTable(X, names, users, movies, None if np.isnan(targets).all() else targets)
