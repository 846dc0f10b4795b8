"""Seeded stand-in for the Netflix data: planted low-rank ratings plus noise."""
from __future__ import annotations

import datetime as dt

import numpy as np

from .dataset import RatingStore, date_to_day

FIRST_DAY = date_to_day(dt.date(1999, 11, 11))
LAST_DAY = date_to_day(dt.date(2005, 12, 31))


def make_synthetic(
    users: int = 2000,
    movies: int = 500,
    rank: int = 5,
    density: float = 0.1,
    noise: float = 0.35,
    factor_scale: float = 1.0,
    bias_scale: float = 0.4,
    mu: float = 3.6,
    seed: int = 0,
    min_per_user: int = 2,
) -> RatingStore:
    """Ratings ``clip(round(mu + b_u + b_i + p_u.q_i + eps), 1, 5)``.

    Each user rates about ``density * movies`` movies (at least
    ``min_per_user``) on uniformly random dates. ``factor_scale`` is the
    standard deviation of the planted interaction term ``p_u.q_i``. External
    user ids are sparse random integers as in the real data; movie ids run
    from 1.
    """
    rng = np.random.default_rng(seed)
    bu = rng.normal(0.0, bias_scale, users)
    bi = rng.normal(0.0, bias_scale, movies)
    if rank > 0:
        s = np.sqrt(factor_scale / np.sqrt(rank))
        P = rng.normal(0.0, s, (users, rank))
        Q = rng.normal(0.0, s, (movies, rank))
    else:
        P = np.zeros((users, 0))
        Q = np.zeros((movies, 0))
    counts = np.maximum(rng.binomial(movies, density, users), min(min_per_user, movies))
    u_idx = np.repeat(np.arange(users), counts)
    m_idx = np.concatenate([rng.choice(movies, size=c, replace=False) for c in counts])
    signal = mu + bu[u_idx] + bi[m_idx] + np.einsum("ij,ij->i", P[u_idx], Q[m_idx])
    ratings = np.clip(np.rint(signal + rng.normal(0.0, noise, len(u_idx))), 1, 5).astype(np.int64)
    days = rng.integers(FIRST_DAY, LAST_DAY + 1, len(u_idx))
    user_ids = np.sort(rng.choice(2_649_429, size=users, replace=False) + 1)
    order = np.lexsort((u_idx, m_idx))  # grouped by movie like the per-movie files
    return RatingStore(user_ids[u_idx[order]], m_idx[order] + 1, ratings[order], days[order])


def make_rank_one(users: int = 30, movies: int = 20, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fully observed ``r_uj = a_u * c_j`` clipped to [1, 5] (rows, cols, values)."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(1.0, 2.2, users)
    c = rng.uniform(1.0, 2.2, movies)
    R = np.clip(np.outer(a, c), 1.0, 5.0)
    rows, cols = np.meshgrid(np.arange(users), np.arange(movies), indexing="ij")
    return rows.ravel(), cols.ravel(), R.ravel()
