"""RMSE / MAPE scoring and the multi-model benchmark report."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .dataset import RatingStore, SparseRatingMatrix
from .predictors import FALLBACK_LEVELS

_log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


def _pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no (actual, predicted) pairs to score")
    arr = arr.reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def rmse(pairs) -> float:
    """Root mean squared error of ``(actual, predicted)`` pairs.

    numpy's pairwise summation keeps the sum of squares stable over 10^8 rows.
    """
    actual, predicted = _pairs(pairs)
    return math.sqrt(np.sum((actual - predicted) ** 2) / len(actual))


def mape(pairs, signed: bool = False) -> float:
    """Mean absolute percentage error.

    ``signed=True`` drops the absolute value, so over- and under-estimates
    cancel.
    """
    actual, predicted = _pairs(pairs)
    if np.any(actual == 0):
        raise ValueError("MAPE is undefined for a zero actual value")
    terms = (actual - predicted) / actual
    if not signed:
        terms = np.abs(terms)
    return float(np.sum(terms) / len(actual) * 100.0)


@dataclass
class EvalRow:
    model: str
    rmse: Optional[float] = None
    mape: Optional[float] = None
    mape_signed: Optional[float] = None
    n_evaluated: int = 0
    n_clamped: int = 0
    n_model_fallback: int = 0
    fallback_counts: dict = field(default_factory=dict)
    fallback_rmse: dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _train_indices(train: Union[RatingStore, SparseRatingMatrix]):
    if isinstance(train, RatingStore):
        return train.user_index, train.movie_index
    if train.user_ids is None or train.movie_ids is None:
        raise ValueError("training matrix carries no external id tables")
    return train.user_ids, train.movie_ids


def evaluate(model, test: RatingStore, train: Union[RatingStore, SparseRatingMatrix], name: Optional[str] = None) -> EvalRow:
    """Predict every test rating and score it, stratified by fallback level."""
    user_index, movie_index = _train_indices(train)
    users = user_index.to_dense(test.users)
    movies = movie_index.to_dense(test.movies)
    values, clamped, levels, model_fb = model.predict_batch(users, movies)
    actual = test.ratings.astype(np.float64)
    pairs = np.column_stack([actual, values])
    row = EvalRow(
        model=name or model.name,
        rmse=rmse(pairs),
        mape=mape(pairs),
        mape_signed=mape(pairs, signed=True),
        n_evaluated=len(test),
        n_clamped=int(np.sum(clamped)),
        n_model_fallback=int(np.sum(model_fb)),
    )
    for code, level in enumerate(FALLBACK_LEVELS):
        mask = levels == code
        row.fallback_counts[level] = int(mask.sum())
        row.fallback_rmse[level] = rmse(pairs[mask]) if mask.any() else None
    return row


@dataclass
class EvalReport:
    rows: list
    dataset: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def failed(self) -> list:
        return [r for r in self.rows if not r.ok]

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dataset": self.dataset,
            "config": self.config,
            "models": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        header = f"{'model':<22} {'RMSE':>8} {'MAPE%':>8} {'sMAPE%':>8} {'n':>10} {'cold':>8}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            if r.ok:
                cold = r.n_evaluated - r.fallback_counts.get("full", 0)
                lines.append(
                    f"{r.model:<22} {r.rmse:>8.4f} {r.mape:>8.2f} {r.mape_signed:>8.2f} {r.n_evaluated:>10d} {cold:>8d}"
                )
            else:
                lines.append(f"{r.model:<22} FAILED: {r.error}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "rmse", "mape", "mape_signed", "n_evaluated", *FALLBACK_LEVELS, "error"])
            for r in self.rows:
                w.writerow([
                    r.model, r.rmse, r.mape, r.mape_signed, r.n_evaluated,
                    *(r.fallback_counts.get(lv, 0) for lv in FALLBACK_LEVELS), r.error or "",
                ])


def sort_rows(rows: Sequence[EvalRow]) -> list[EvalRow]:
    """Ascending RMSE, ties by name; failed rows last."""
    return sorted(rows, key=lambda r: (not r.ok, r.rmse if r.ok else 0.0, r.model))


ModelSpec = tuple  # (name, callable returning a fitted model)


def benchmark(
    specs: Sequence[tuple[str, Callable[[], object]]],
    train: Union[RatingStore, SparseRatingMatrix],
    test: RatingStore,
    threads: int = 1,
    dataset: Optional[dict] = None,
    config: Optional[dict] = None,
) -> EvalReport:
    """Fit and score every spec; one failing model does not stop the rest."""

    def run(spec):
        name, factory = spec
        try:
            return evaluate(factory(), test, train, name)
        except Exception as exc:  # report, keep going
            _log.exception("model %s failed", name)
            return EvalRow(model=name, error=f"{type(exc).__name__}: {exc}")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, specs))
    else:
        rows = [run(s) for s in specs]
    return EvalReport(sort_rows(rows), dataset or {}, config or {})


def dataset_fingerprint(train: RatingStore, test: RatingStore) -> dict:
    return {
        "train": {"ratings": len(train), "users": train.n_users, "movies": train.n_movies},
        "test": {"ratings": len(test), "users": test.n_users, "movies": test.n_movies},
        "split_hash": train.fingerprint() + test.fingerprint(),
    }
