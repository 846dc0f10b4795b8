"""Boosted trees over hand-made features and/or other models' predictions."""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .features import FeatureBuilder, FeatureTable, build_training_table, stack_table
from .gbt import GbtConfig, GbtModel, fit_gbt
from .predictors import Predictor


class BatchMemo:
    """Thread-safe memo of per-batch columns keyed by a label and the exact row ids.

    Stacked models sharing base models (by name) can share one memo so each
    base prediction column and feature table is computed once per batch.
    """

    def __init__(self):
        self._data: dict = {}
        self._lock = threading.Lock()

    def get(self, label: str, users: np.ndarray, movies: np.ndarray, compute):
        digest = hashlib.sha1(np.ascontiguousarray(users, dtype=np.int64).tobytes())
        digest.update(np.ascontiguousarray(movies, dtype=np.int64).tobytes())
        key = (label, len(users), digest.hexdigest())
        with self._lock:
            if key in self._data:
                return self._data[key]
        value = compute()
        with self._lock:
            return self._data.setdefault(key, value)

    def __len__(self) -> int:
        return len(self._data)


@dataclass
class StackedGbtModel(Predictor):
    """GBT regressor whose inputs are the 13 base features (optional) plus
    the predictions of ``base_models`` in order."""

    builder: FeatureBuilder
    base_models: list
    gbt: GbtModel
    use_features: bool = True
    label: str = "gbt"
    memo: Optional[BatchMemo] = None

    @property
    def name(self) -> str:
        return self.label

    @property
    def n_users(self) -> int:
        return self.builder.matrix.n_users

    @property
    def n_movies(self) -> int:
        return self.builder.matrix.n_movies

    def features(self, users, movies) -> FeatureTable:
        users = np.asarray(users, dtype=np.int64)
        movies = np.asarray(movies, dtype=np.int64)
        if self.use_features:
            make = lambda: self.builder.table(users, movies)
            table = make() if self.memo is None else self.memo.get("base-features", users, movies, make)
        else:
            table = FeatureTable(np.empty((len(users), 0)), (), users, movies)
        return stack_table(table, self.base_models, self.memo)

    def raw_batch(self, users, movies):
        table = self.features(users, movies)
        padded = np.zeros(len(users), dtype=bool) if table.padded is None else table.padded > 0
        return self.gbt.predict_table(table.X), padded


def fit_stacked(
    builder: FeatureBuilder,
    base_models: Sequence[Predictor],
    config: Optional[GbtConfig] = None,
    use_features: bool = True,
    label: str = "gbt",
    sample: Optional[int] = None,
    seed: int = 0,
    base_table: Optional[FeatureTable] = None,
    leave_one_out: bool = True,
    memo: Optional[BatchMemo] = None,
) -> StackedGbtModel:
    """Fit on (a sample of) the training ratings the builder was made from.

    ``base_table`` lets several stacked models share one precomputed
    13-feature training table.
    """
    matrix = builder.matrix
    if base_table is None:
        if use_features:
            base_table = build_training_table(matrix, builder.aggregates, sample, seed, builder, leave_one_out)
        else:
            rows = np.arange(matrix.nnz) if sample is None else np.random.default_rng(seed).choice(
                matrix.nnz, size=sample, replace=False
            )
            base_table = FeatureTable(
                np.empty((len(rows), len(builder.names))), builder.names,
                matrix.entry_users[rows].astype(np.int64), matrix.user_movies[rows].astype(np.int64),
                matrix.user_ratings[rows],
            )
    if use_features:
        table = base_table
    else:
        table = FeatureTable(np.empty((len(base_table), 0)), (), base_table.users, base_table.movies, base_table.targets)
    table = stack_table(table, list(base_models), memo)
    gbt = fit_gbt(table.X, table.targets, config, table.names)
    return StackedGbtModel(builder, list(base_models), gbt, use_features, label, memo)
