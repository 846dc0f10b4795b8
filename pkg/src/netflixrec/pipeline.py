"""End-to-end run: ingest, split, eda, features, train, benchmark.

Every stage stores its artifact under ``<output>/cache`` keyed by a hash of
its inputs (upstream keys plus the config sections it reads). A rerun with an
unchanged config loads everything from the cache and writes identical
report bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .analytics import eda_report, write_eda
from .config import STACKED_MODELS, RunConfig
from .dataset import (RatingStore, SparseRatingMatrix, build_matrix, load_store, parse_training_set,
                      read_cache_fingerprint, save_store, temporal_split)
from .evaluation import EvalReport, EvalRow, benchmark, dataset_fingerprint
from .features import FeatureBuilder, FeatureTable, build_training_table, compute_aggregates
from .modelio import load_model, save_model
from .predictors import KnnConfig, fit_baseline, fit_global_mean, fit_knn, fit_mf
from .similarity import NeighborCache
from .stacking import BatchMemo, fit_stacked
from .synthetic import make_synthetic

# stacked model -> (uses the 13 base features, base models in input order)
STACK_RECIPES = {
    "gbt13": (True, ()),
    "gbt-stack-bsl-knn": (True, ("baseline", "knn-user", "knn-movie")),
    "gbt-stack-preds": (False, ("baseline", "knn-user", "knn-movie", "svd", "svdpp")),
    "gbt-stack-all": (True, ("baseline", "knn-user", "knn-movie", "svd", "svdpp")),
}
GBT_MODELS = ("gbt13",) + STACKED_MODELS


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


def content_key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _file_identity(path: str) -> list:
    """Cheap stand-in for hashing multi-GB inputs: name, size and mtime of every file."""
    if not path:
        return []
    p = Path(path)
    files = sorted(p.rglob("*")) if p.is_dir() else [p]
    return [(str(f.relative_to(p) if p.is_dir() else f.name), f.stat().st_size, f.stat().st_mtime_ns)
            for f in files if f.is_file()]


def resolve_models(names) -> list[str]:
    """Requested models plus every base model a stacked one needs, bases first."""
    wanted = list(dict.fromkeys(names))
    bases = [b for n in wanted if n in STACK_RECIPES for b in STACK_RECIPES[n][1]]
    ordered = [n for n in dict.fromkeys(bases + wanted) if n not in STACK_RECIPES]
    return ordered + [n for n in wanted if n in STACK_RECIPES]


class Pipeline:
    """Stage runner with content-addressed caching; stages run lazily on demand."""

    def __init__(self, config: RunConfig, log: Optional[Callable[[str], None]] = None):
        self.config = config
        self.out = Path(config.run.output)
        self.cache_dir = self.out / "cache"
        self.log = log or (lambda msg: print(msg, file=sys.stderr))
        self.status: dict[str, str] = {}
        self._memo: dict = {}
        self.memo = BatchMemo()

    # -- helpers ----------------------------------------------------------

    def _mark(self, stage: str, hit: bool, key: str) -> None:
        state = "cache hit" if hit else "computed"
        self.status[stage] = state
        self.log(f"[{stage}] {state} ({key})")

    def _run(self, stage: str, fn):
        if stage in self._memo:
            return self._memo[stage]
        try:
            result = fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        self._memo[stage] = result
        return result

    def _cached_store(self, path: Path, key: str, compute: Callable[[], RatingStore]) -> tuple[RatingStore, bool]:
        if path.exists() and read_cache_fingerprint(path) == key:
            return load_store(path), True
        store = compute()
        path.parent.mkdir(parents=True, exist_ok=True)
        save_store(store, path, fingerprint=key)
        return store, False

    # -- stages -----------------------------------------------------------

    def ingest_key(self) -> str:
        c = self.config
        if c.data.source == "synthetic":
            return content_key("ingest", asdict(c.synthetic), c.run.seed)
        return content_key("ingest", c.data.training_set, _file_identity(c.data.training_set))

    def ingest(self) -> RatingStore:
        def go():
            c = self.config
            key = self.ingest_key()
            if c.data.source == "synthetic":
                s = c.synthetic
                compute = lambda: make_synthetic(s.users, s.movies, s.rank, s.density, s.noise, s.factor_scale,
                                                 s.bias_scale, seed=c.run.seed)
            else:
                compute = lambda: parse_training_set(c.data.training_set, threads=c.run.threads)
            store, hit = self._cached_store(self.cache_dir / f"ingest-{key}.nflx", key, compute)
            self._mark("ingest", hit, key)
            return store

        return self._run("ingest", go)

    def split_key(self) -> str:
        return content_key("split", self.ingest_key(), self.config.run.train_fraction)

    def split(self) -> tuple[RatingStore, RatingStore]:
        def go():
            key = self.split_key()
            paths = [self.cache_dir / f"split-{key}-{part}.nflx" for part in ("train", "test")]
            if all(p.exists() and read_cache_fingerprint(p) == key for p in paths):
                self._mark("split", True, key)
                return load_store(paths[0]), load_store(paths[1])
            train, test = temporal_split(self.ingest(), self.config.run.train_fraction)
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            for part, p in zip((train, test), paths):
                save_store(part, p, fingerprint=key)
            self._mark("split", False, key)
            return train, test

        return self._run("split", go)

    def matrix(self) -> SparseRatingMatrix:
        return self._run("matrix", lambda: build_matrix(self.split()[0]))

    def eda(self):
        def go():
            key = content_key("eda", self.split_key())
            directory = self.out / "eda"
            stamp = directory / ".key"
            if stamp.exists() and stamp.read_text() == key:
                self._mark("eda", True, key)
                return json.loads((directory / "eda.json").read_text())
            train, test = self.split()
            report = eda_report(train, self.matrix(), test)
            write_eda(report, directory)
            stamp.write_text(key)
            self._mark("eda", False, key)
            return report.to_dict()

        return self._run("eda", go)

    def features_key(self) -> str:
        return content_key("features", self.split_key(), asdict(self.config.features), self.config.run.seed)

    def builder(self) -> FeatureBuilder:
        def go():
            f = self.config.features
            m = self.matrix()
            return FeatureBuilder(m, compute_aggregates(m), f.k, f.neighbor_feature, f.min_support, NeighborCache(65536))

        return self._run("builder", go)

    def _train_sample(self) -> Optional[int]:
        n = self.config.features.train_sample
        return None if n == 0 or n >= self.matrix().nnz else n

    def features(self) -> FeatureTable:
        """The 13-feature table over (a sample of) the training ratings."""

        def go():
            key = self.features_key()
            path = self.cache_dir / f"features-{key}.npz"
            if path.exists():
                with np.load(path, allow_pickle=False) as z:
                    table = FeatureTable(z["X"], tuple(str(n) for n in z["names"]), z["users"], z["movies"],
                                         z["targets"], z["padded"])
                self._mark("features", True, key)
                return table
            b = self.builder()
            table = build_training_table(b.matrix, b.aggregates, self._train_sample(), self.config.run.seed, b,
                                         self.config.features.leave_one_out)
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp.npz")
            np.savez(tmp, X=table.X, names=np.array(table.names), users=table.users, movies=table.movies,
                     targets=table.targets, padded=table.padded)
            os.replace(tmp, path)
            self._mark("features", False, key)
            return table

        return self._run("features", go)

    def model_key(self, name: str) -> str:
        c = self.config
        if name in STACK_RECIPES:
            use_features, bases = STACK_RECIPES[name]
            return content_key("model", name, self.features_key(), asdict(c.gbt), use_features,
                               [self.model_key(b) for b in bases])
        section = {
            "global-mean": {},
            "baseline": asdict(c.baseline),
            "knn-user": [asdict(c.baseline), asdict(c.knn)],
            "knn-movie": [asdict(c.baseline), asdict(c.knn)],
            "svd": asdict(c.svd),
            "svdpp": asdict(c.svdpp),
        }[name]
        return content_key("model", name, self.split_key(), section)

    def _fit(self, name: str, fitted: dict):
        c = self.config
        m = self.matrix()
        if name == "global-mean":
            return fit_global_mean(m)
        if name == "baseline":
            return fit_baseline(m, c.baseline)
        if name in ("knn-user", "knn-movie"):
            kc = KnnConfig(c.knn.k, c.knn.shrinkage, name.split("-")[1], c.baseline, c.knn.cache_size)
            return fit_knn(m, kc)
        if name == "svd":
            return fit_mf(m, c.svd)
        if name == "svdpp":
            return fit_mf(m, c.svdpp)
        use_features, bases = STACK_RECIPES[name]
        missing = [b for b in bases if isinstance(fitted.get(b), BaseException)]
        if missing:
            raise RuntimeError(f"base model(s) failed: {', '.join(missing)}")
        table = self.features()
        return fit_stacked(self.builder(), [fitted[b] for b in bases], c.gbt, use_features, name,
                           base_table=table, memo=self.memo)

    def _load_or_fit(self, name: str, fitted: dict) -> tuple[object, bool]:
        key = self.model_key(name)
        path = self.cache_dir / f"model-{name}-{key}.nfrm"
        if path.exists():
            model = load_model(path, self.matrix())
            if name in STACK_RECIPES:
                # the cached bases are the same fits as the pipeline's own; sharing them
                # (and one builder and memo) avoids recomputing identical columns
                model.builder = self.builder()
                model.base_models = [fitted[b] for b in STACK_RECIPES[name][1]]
                model.memo = self.memo
            return model, True
        model = self._fit(name, fitted)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        save_model(model, tmp)
        os.replace(tmp, path)
        return model, False

    def train(self, names=None) -> dict:
        """Fitted model (or the exception that stopped it) per name, bases included."""
        names = resolve_models(names or self.config.run.models)
        fitted: dict = self._memo.setdefault("models", {})
        todo = [n for n in names if n not in fitted]
        if not todo:
            return {n: fitted[n] for n in names}
        self.matrix()

        def one(name):
            try:
                model, hit = self._load_or_fit(name, fitted)
                self._mark(f"train:{name}", hit, self.model_key(name))
                return name, model
            except Exception as exc:
                self.status[f"train:{name}"] = "failed"
                self.log(f"[train:{name}] failed: {type(exc).__name__}: {exc}")
                return name, exc

        base = [n for n in todo if n not in STACK_RECIPES]
        stacked = [n for n in todo if n in STACK_RECIPES]
        if stacked:
            self.features()
        for group in (base, stacked):
            if self.config.run.threads > 1 and len(group) > 1:
                with ThreadPoolExecutor(self.config.run.threads) as pool:
                    results = list(pool.map(one, group))
            else:
                results = [one(n) for n in group]
            fitted.update(results)
        return {n: fitted[n] for n in names}

    def _artifacts_present(self, names) -> bool:
        """True when every model (and the feature table, if used) is cached; marks features as a hit."""
        resolved = resolve_models(names)
        models = all((self.cache_dir / f"model-{n}-{self.model_key(n)}.nfrm").exists() for n in resolved)
        if not models:
            return False
        if any(n in STACK_RECIPES for n in resolved):
            key = self.features_key()
            if not (self.cache_dir / f"features-{key}.npz").exists():
                return False
            self._mark("features", True, key)
        return True

    def benchmark_key(self, names) -> str:
        return content_key("benchmark", [(n, self.model_key(n)) for n in names], self.config.echo())

    def benchmark(self, names=None) -> EvalReport:
        names = list(dict.fromkeys(names or self.config.run.models))
        key = self.benchmark_key(names)
        path = self.cache_dir / f"benchmark-{key}.json"
        if path.exists() and self._artifacts_present(names):
            for name in resolve_models(names):
                self._mark(f"train:{name}", True, self.model_key(name))
            report = report_from_json(path.read_text())
            self._mark("benchmark", True, key)
            return report
        models = self.train(names)
        train, test = self.split()

        def factory(name):
            def make():
                m = models[name]
                if isinstance(m, BaseException):
                    raise m
                return m
            return make

        try:
            report = benchmark([(n, factory(n)) for n in names], self.matrix(), test, threads=self.config.run.threads,
                               dataset=dataset_fingerprint(train, test), config=self.config.echo())
        except Exception as exc:
            raise StageError("benchmark", exc) from exc
        if not report.failed:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            path.write_text(report.to_json())
        self._mark("benchmark", False, key)
        return report


def report_from_json(text: str) -> EvalReport:
    d = json.loads(text)
    rows = [EvalRow(**r) for r in d["models"]]
    return EvalReport(rows, d["dataset"], d["config"], d["schema_version"])


def write_report(report: EvalReport, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    report.write_csv(out / "report.csv")
    (out / "report.txt").write_text(report.to_table())


def run_pipeline(config: RunConfig, log: Optional[Callable[[str], None]] = None) -> tuple[EvalReport, dict]:
    """Run every stage; returns the benchmark report and per-stage cache status."""
    p = Pipeline(config, log)
    p.ingest()
    p.split()
    p.eda()
    report = p.benchmark()
    write_report(report, p.out)
    return report, dict(p.status)
