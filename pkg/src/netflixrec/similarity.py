"""On-demand neighbour search over sparse rating vectors.

Nothing here materializes an m x m similarity matrix. Scoring an anchor walks
the anchor's ratings and, through the opposite orientation's index, only the
users (or movies) that share at least one item with it.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Hashable, Literal, Mapping, Optional, Union

import numpy as np

from .dataset import SparseRatingMatrix

Orientation = Literal["user", "movie"]
SparseVector = Union[Mapping[int, float], tuple]


@dataclass(frozen=True)
class NeighborList:
    anchor: int
    ids: np.ndarray
    scores: np.ndarray

    @property
    def neighbors(self) -> list[tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.ids, self.scores)]

    def __len__(self) -> int:
        return len(self.ids)


class NeighborCache:
    """Bounded, thread-safe LRU memo for per-anchor score vectors.

    Values are pure functions of their key, so eviction only costs time.
    """

    def __init__(self, maxsize: int = 1024):
        self.maxsize = maxsize
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key: Hashable, compute: Callable[[], object]):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                self.hits += 1
                return self._data[key]
            self.misses += 1
        value = compute()
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self.maxsize:
                self._data.popitem(last=False)
        return value

    def __len__(self) -> int:
        return len(self._data)


def _as_arrays(v: SparseVector) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(v, Mapping):
        ids = np.fromiter(v.keys(), dtype=np.int64, count=len(v))
        vals = np.fromiter(v.values(), dtype=np.float64, count=len(v))
    else:
        ids, vals = (np.asarray(x) for x in v)
        ids = ids.astype(np.int64)
        vals = vals.astype(np.float64)
    order = np.argsort(ids, kind="stable")
    return ids[order], vals[order]


def cosine(a: SparseVector, b: SparseVector) -> float:
    """Cosine of two sparse vectors given as ``{id: value}`` or ``(ids, values)``.

    Returns 0.0 when either vector has zero norm.
    """
    ia, va = _as_arrays(a)
    ib, vb = _as_arrays(b)
    na = np.sqrt(np.dot(va, va))
    nb = np.sqrt(np.dot(vb, vb))
    if na == 0.0 or nb == 0.0:
        return 0.0
    _, pa, pb = np.intersect1d(ia, ib, assume_unique=True, return_indices=True)
    return float(np.dot(va[pa], vb[pb]) / (na * nb))


def _views(matrix: SparseRatingMatrix, orientation: Orientation):
    """(anchor-side ptr/ids/vals, other-side ptr/ids/vals, n_other)."""
    if orientation == "user":
        return (matrix.user_ptr, matrix.user_movies, matrix.user_ratings,
                matrix.movie_ptr, matrix.movie_users, matrix.movie_ratings, matrix.n_users)
    if orientation == "movie":
        return (matrix.movie_ptr, matrix.movie_users, matrix.movie_ratings,
                matrix.user_ptr, matrix.user_movies, matrix.user_ratings, matrix.n_movies)
    raise ValueError(f"orientation must be 'user' or 'movie', got {orientation!r}")


def co_ratings(anchor: int, matrix: SparseRatingMatrix, orientation: Orientation):
    """Every co-rating of ``anchor`` through the inverted index.

    Returns parallel arrays ``(others, items, anchor_vals, other_vals)``: one
    entry per (other, shared item) pair, the anchor itself included.
    """
    a_ptr, a_ids, a_vals, o_ptr, o_ids, o_vals, n_other = _views(matrix, orientation)
    if not 0 <= anchor < n_other:
        raise IndexError(f"unknown {orientation} index {anchor}")
    items = a_ids[a_ptr[anchor]:a_ptr[anchor + 1]].astype(np.int64)
    mine = a_vals[a_ptr[anchor]:a_ptr[anchor + 1]]
    starts = o_ptr[items]
    lens = o_ptr[items + 1] - starts
    total = int(lens.sum())
    if total == 0:
        empty_i = np.empty(0, dtype=np.int64)
        empty_f = np.empty(0, dtype=np.float64)
        return empty_i, empty_i, empty_f, empty_f
    seg = np.repeat(np.cumsum(lens) - lens, lens)
    pos = np.repeat(starts, lens) + (np.arange(total) - seg)
    return (o_ids[pos].astype(np.int64), np.repeat(items, lens), np.repeat(mine, lens), o_vals[pos])


def cosine_parts(anchor: int, matrix: SparseRatingMatrix, orientation: Orientation):
    """Dot products of ``anchor`` with every user (or movie) and overlap counts."""
    others, _, mine, theirs = co_ratings(anchor, matrix, orientation)
    n = matrix.n_users if orientation == "user" else matrix.n_movies
    dots = np.bincount(others, weights=mine * theirs, minlength=n)
    overlap = np.bincount(others, minlength=n)
    return dots, overlap


def cosine_scores(anchor: int, matrix: SparseRatingMatrix, orientation: Orientation):
    """Cosine of ``anchor`` against every user (or movie), plus overlap counts."""
    dots, overlap = cosine_parts(anchor, matrix, orientation)
    norms = matrix.user_norms if orientation == "user" else matrix.movie_norms
    denom = norms[anchor] * norms
    scores = np.divide(dots, denom, out=np.zeros(len(dots)), where=denom > 0)
    return scores, overlap


def select_top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The k best (id, score) pairs: score descending, ties by ascending id."""
    if k <= 0 or len(ids) == 0:
        return ids[:0], scores[:0]
    if len(ids) > 4 * k:
        kth = np.partition(scores, len(scores) - k)[len(scores) - k]
        keep = scores >= kth
        ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores))[:k]
    return ids[order], scores[order]


def _cached(cache, key, compute):
    return cache.get(key, compute) if cache is not None else compute()


def _top_k(anchor, matrix, k, candidates, orientation, min_support, cache):
    scores, overlap = _cached(cache, ("cosine", orientation, anchor), lambda: cosine_scores(anchor, matrix, orientation))
    if candidates is None:
        cand = np.flatnonzero(overlap >= min_support)
    else:
        cand = np.asarray(candidates, dtype=np.int64)
        cand = cand[overlap[cand] >= min_support]
    cand = cand[cand != anchor]
    ids, sc = select_top_k(cand, scores[cand], k)
    return NeighborList(anchor, ids, sc)


def top_k_similar_users(
    u: int,
    matrix: SparseRatingMatrix,
    k: int,
    candidate_filter: Optional[int] = None,
    min_support: int = 1,
    cache: Optional[NeighborCache] = None,
) -> NeighborList:
    """Most cosine-similar users to ``u``.

    With ``candidate_filter=j`` only users who rated movie ``j`` compete.
    Users sharing fewer than ``min_support`` movies with ``u`` are skipped.
    """
    if not 0 <= u < matrix.n_users:
        raise IndexError(f"unknown user index {u}")
    candidates = None if candidate_filter is None else matrix.by_movie(candidate_filter)[0]
    return _top_k(u, matrix, k, candidates, "user", min_support, cache)


def top_k_similar_movies(
    j: int,
    matrix: SparseRatingMatrix,
    k: int,
    candidate_filter: Optional[int] = None,
    min_support: int = 1,
    cache: Optional[NeighborCache] = None,
) -> NeighborList:
    """Movie counterpart of :func:`top_k_similar_users`; the filter is a user."""
    if not 0 <= j < matrix.n_movies:
        raise IndexError(f"unknown movie index {j}")
    candidates = None if candidate_filter is None else matrix.by_user(candidate_filter)[0]
    return _top_k(j, matrix, k, candidates, "movie", min_support, cache)


# --------------------------------------------------------------------------
# shrunk Pearson-baseline


def top_k_without_rating(
    u: int,
    j: int,
    matrix: SparseRatingMatrix,
    k: int,
    orientation: Orientation,
    min_support: int = 1,
    cache: Optional[NeighborCache] = None,
) -> NeighborList:
    """Top-k neighbours for an observed pair (u, j) as if r_uj were not in ``matrix``.

    Orientation "user" ranks users who rated j by similarity to u; "movie"
    ranks movies u rated by similarity to j. Removing r_uj only changes the
    anchor's norm and its dot product with each candidate (every candidate
    shares exactly that one cell), so the full-matrix dots are reused.
    """
    r = matrix.rating(u, j)
    if r is None:
        raise KeyError(f"({u}, {j}) is not an observed rating")
    if orientation == "user":
        anchor, (cand, shared) = u, matrix.by_movie(j)
        sq = matrix.user_sq_norms
    else:
        anchor, (cand, shared) = j, matrix.by_user(u)
        sq = matrix.movie_sq_norms
    dots, overlap = _cached(cache, ("dots", orientation, anchor), lambda: cosine_parts(anchor, matrix, orientation))
    keep = cand != anchor
    cand = cand[keep].astype(np.int64)
    shared = shared[keep]
    loo_overlap = overlap[cand] - 1
    ok = loo_overlap >= min_support
    cand, shared = cand[ok], shared[ok]
    loo_dots = dots[cand] - r * shared
    denom = np.sqrt(sq[anchor] - r * r) * np.sqrt(sq[cand])
    scores = np.divide(loo_dots, denom, out=np.zeros(len(cand)), where=denom > 0)
    ids, sc = select_top_k(cand, scores, k)
    return NeighborList(anchor, ids, sc)


def _baseline_pair(baselines, orientation, anchor, others, items):
    """Baseline estimates for the anchor's and the others' side of co-ratings."""
    mu, bu, bm = baselines.mu, baselines.b_user, baselines.b_movie
    if orientation == "user":
        return mu + bu[anchor] + bm[items], mu + bu[others] + bm[items]
    return mu + bm[anchor] + bu[items], mu + bm[others] + bu[items]


def _check_dims(matrix, baselines):
    if len(baselines.b_user) != matrix.n_users or len(baselines.b_movie) != matrix.n_movies:
        raise ValueError(
            f"baseline dimensions ({len(baselines.b_user)}, {len(baselines.b_movie)}) "
            f"do not match matrix {matrix.shape}"
        )


def _shrunk(num, sa, so, n, shrinkage):
    num, n = np.asarray(num, dtype=np.float64), np.asarray(n, dtype=np.float64)
    denom = np.sqrt(sa * so)
    ok = (n >= 2) & (denom > 0)
    corr = np.divide(num, denom, out=np.zeros_like(num), where=ok)
    # n / (n + shrinkage) is 0/0 when both are zero; corr is already 0 there
    damp = np.divide(n, n + shrinkage, out=np.zeros_like(num), where=ok)
    return corr * damp


def pearson_baseline_sim(
    i: int,
    j: int,
    matrix: SparseRatingMatrix,
    baselines,
    shrinkage: float = 100.0,
    orientation: Orientation = "user",
) -> float:
    """Correlation of baseline residuals over co-rated items, shrunk by n/(n+shrinkage).

    Residuals are ``r - (mu + b_user + b_movie)``; being already centred by the
    baseline they are not re-centred. Zero when fewer than two co-ratings.
    """
    _check_dims(matrix, baselines)
    get = matrix.by_user if orientation == "user" else matrix.by_movie
    ia, ra = get(i)
    ib, rb = get(j)
    common, pa, pb = np.intersect1d(ia, ib, assume_unique=True, return_indices=True)
    n = len(common)
    if n < 2:
        return 0.0
    ba, _ = _baseline_pair(baselines, orientation, i, np.array([j]), common.astype(np.int64))
    bb, _ = _baseline_pair(baselines, orientation, j, np.array([i]), common.astype(np.int64))
    xa = ra[pa] - ba
    xb = rb[pb] - bb
    out = _shrunk(np.array([xa @ xb]), np.array([xa @ xa]), np.array([xb @ xb]), np.array([float(n)]), shrinkage)
    return float(out[0])


def pearson_baseline_scores(
    anchor: int,
    matrix: SparseRatingMatrix,
    baselines,
    shrinkage: float = 100.0,
    orientation: Orientation = "user",
) -> np.ndarray:
    """:func:`pearson_baseline_sim` of ``anchor`` against every user (or movie) at once."""
    _check_dims(matrix, baselines)
    others, items, mine, theirs = co_ratings(anchor, matrix, orientation)
    n_other = matrix.n_users if orientation == "user" else matrix.n_movies
    b_mine, b_theirs = _baseline_pair(baselines, orientation, anchor, others, items)
    xa = mine - b_mine
    xb = theirs - b_theirs
    num = np.bincount(others, weights=xa * xb, minlength=n_other)
    sa = np.bincount(others, weights=xa * xa, minlength=n_other)
    so = np.bincount(others, weights=xb * xb, minlength=n_other)
    n = np.bincount(others, minlength=n_other).astype(np.float64)
    return _shrunk(num, sa, so, n, shrinkage)
