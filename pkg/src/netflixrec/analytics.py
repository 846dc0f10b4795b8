"""Exploratory statistics over rating stores and matrices."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import RatingStore, SparseRatingMatrix, build_matrix

WEEKDAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
QUANTILE_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)
# 1998-01-01 (day 0) was a Thursday
_DAY0_WEEKDAY = 3


def rating_distribution(matrix: SparseRatingMatrix) -> dict[int, int]:
    counts = np.bincount(matrix.user_ratings.astype(np.int64), minlength=6)
    return {star: int(counts[star]) for star in range(1, 6)}


def user_activity_quantiles(matrix: SparseRatingMatrix) -> dict:
    """Quantiles and mean of the number of ratings per user."""
    counts = matrix.user_counts()
    counts = counts[counts > 0]
    if len(counts) == 0:
        raise ValueError("user activity of an empty matrix is undefined")
    q = np.quantile(counts, QUANTILE_LEVELS)
    out = {level: float(v) for level, v in zip(QUANTILE_LEVELS, q)}
    out["mean"] = float(counts.mean())
    return out


def weekday_of(days: np.ndarray) -> np.ndarray:
    """Monday=0 .. Sunday=6 for day counts since 1998-01-01."""
    return (np.asarray(days, dtype=np.int64) + _DAY0_WEEKDAY) % 7


def weekday_analysis(store: RatingStore) -> tuple[list[int], list[Optional[tuple[float, ...]]]]:
    """Rating counts per weekday and a five-number summary of ratings per weekday."""
    wd = weekday_of(store.days)
    counts = np.bincount(wd, minlength=7)
    summaries = []
    for d in range(7):
        r = store.ratings[wd == d]
        summaries.append(tuple(float(x) for x in np.quantile(r, QUANTILE_LEVELS)) if len(r) else None)
    return [int(c) for c in counts], summaries


def sparsity(matrix: SparseRatingMatrix, shape: Optional[tuple[int, int]] = None) -> float:
    """Percentage of empty cells.

    By default the matrix's own user/movie counts are the denominator; pass
    ``shape`` to measure against another id space (e.g. max external id + 1).
    """
    m, n = shape if shape is not None else matrix.shape
    if m * n == 0:
        raise ValueError("sparsity of a zero-dimension matrix is undefined")
    return 100.0 * (1.0 - matrix.nnz / (m * n))


def id_space_shape(*stores: RatingStore) -> tuple[int, int]:
    """(max external user id + 1, max external movie id + 1) over the stores."""
    users = max(int(s.users.max()) for s in stores if len(s))
    movies = max(int(s.movies.max()) for s in stores if len(s))
    return users + 1, movies + 1


@dataclass
class ColdStart:
    users_missing: int
    users_total: int
    movies_missing: int
    movies_total: int

    @property
    def users_percent(self) -> float:
        return 100.0 * self.users_missing / self.users_total if self.users_total else 0.0

    @property
    def movies_percent(self) -> float:
        return 100.0 * self.movies_missing / self.movies_total if self.movies_total else 0.0

    def to_dict(self) -> dict:
        return {
            "users_missing_from_train": self.users_missing,
            "users_total": self.users_total,
            "users_percent": round(self.users_percent, 2),
            "movies_missing_from_train": self.movies_missing,
            "movies_total": self.movies_total,
            "movies_percent": round(self.movies_percent, 2),
        }


def cold_start_report(train: RatingStore, test: RatingStore) -> ColdStart:
    """Test ids absent from train, relative to all distinct ids in train and test."""
    tu, su = train.user_index.ids, test.user_index.ids
    tm, sm = train.movie_index.ids, test.movie_index.ids
    return ColdStart(
        users_missing=len(np.setdiff1d(su, tu)),
        users_total=len(np.union1d(su, tu)),
        movies_missing=len(np.setdiff1d(sm, tm)),
        movies_total=len(np.union1d(sm, tm)),
    )


@dataclass
class EdaReport:
    rating_histogram: dict
    per_user_count_quantiles: dict
    weekday_counts: list
    weekday_rating_quartiles: list
    sparsity_percent: float
    sparsity_percent_id_space: float
    n_ratings: int
    n_users: int
    n_movies: int
    cold_start: Optional[ColdStart] = None
    test_sparsity_percent: Optional[float] = None
    test_sparsity_percent_id_space: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_user_count_quantiles"] = {str(k): v for k, v in self.per_user_count_quantiles.items()}
        d["rating_histogram"] = {str(k): v for k, v in self.rating_histogram.items()}
        d["weekday_counts"] = dict(zip(WEEKDAYS, self.weekday_counts))
        d["weekday_rating_quartiles"] = dict(zip(WEEKDAYS, self.weekday_rating_quartiles))
        for key in ("sparsity_percent", "sparsity_percent_id_space", "test_sparsity_percent",
                    "test_sparsity_percent_id_space"):
            if d[key] is not None:
                d[key] = round(d[key], 2)
        d["cold_start"] = self.cold_start.to_dict() if self.cold_start else None
        return d


def eda_report(train: RatingStore, train_matrix: SparseRatingMatrix, test: Optional[RatingStore] = None) -> EdaReport:
    stores = [train] if test is None else [train, test]
    id_shape = id_space_shape(*stores)
    counts, quartiles = weekday_analysis(train)
    report = EdaReport(
        rating_histogram=rating_distribution(train_matrix),
        per_user_count_quantiles=user_activity_quantiles(train_matrix),
        weekday_counts=counts,
        weekday_rating_quartiles=quartiles,
        sparsity_percent=sparsity(train_matrix),
        sparsity_percent_id_space=sparsity(train_matrix, id_shape),
        n_ratings=train_matrix.nnz,
        n_users=train_matrix.n_users,
        n_movies=train_matrix.n_movies,
    )
    if test is not None and len(test):
        test_matrix = build_matrix(test)
        report.cold_start = cold_start_report(train, test)
        report.test_sparsity_percent = sparsity(test_matrix)
        report.test_sparsity_percent_id_space = sparsity(test_matrix, id_shape)
    return report


def write_eda(report: EdaReport, directory) -> None:
    """JSON report plus histogram.csv, quantiles.csv and weekday.csv."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eda.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rating", "count"])
        w.writerows(sorted(report.rating_histogram.items()))
    with open(out / "quantiles.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantile", "ratings_per_user"])
        w.writerows((str(k), v) for k, v in report.per_user_count_quantiles.items())
    with open(out / "weekday.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["weekday", "count", "min", "q1", "median", "q3", "max"])
        for name, count, summary in zip(WEEKDAYS, report.weekday_counts, report.weekday_rating_quartiles):
            w.writerow([name, count, *(summary if summary else [""] * 5)])
