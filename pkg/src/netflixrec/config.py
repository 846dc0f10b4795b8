"""Run configuration: INI-style ``key = value`` sections, validated all at once.

Every key can be overridden from the environment as
``NETFLIXREC_<SECTION>_<KEY>`` (upper case), e.g. ``NETFLIXREC_SVD_FACTORS=50``.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .gbt import GbtConfig
from .predictors import BaselineConfig, MfConfig

ENV_PREFIX = "NETFLIXREC_"

STANDALONE_MODELS = ("global-mean", "baseline", "knn-user", "knn-movie", "svd", "svdpp", "gbt13")
STACKED_MODELS = ("gbt-stack-bsl-knn", "gbt-stack-preds", "gbt-stack-all")
ALL_MODELS = STANDALONE_MODELS + STACKED_MODELS


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


@dataclass
class RunSection:
    seed: int = 0
    output: str = "out"
    threads: int = 1
    train_fraction: float = 0.8
    models: tuple = ALL_MODELS


@dataclass
class DataSection:
    source: str = "synthetic"  # or "netflix"
    training_set: str = ""
    movie_titles: str = ""
    probe: str = ""


@dataclass
class SyntheticSection:
    users: int = 2000
    movies: int = 500
    rank: int = 5
    density: float = 0.1
    noise: float = 0.35
    factor_scale: float = 1.0
    bias_scale: float = 0.4


@dataclass
class KnnSection:
    k: int = 40
    shrinkage: float = 100.0
    cache_size: int = 4096


@dataclass
class FeatureSection:
    k: int = 5
    neighbor_feature: str = "similarity"
    min_support: int = 1
    train_sample: int = 0  # 0 = every training rating
    leave_one_out: bool = True


def _svdpp_defaults() -> MfConfig:
    return MfConfig(factors=20, epochs=20, lr=0.007, reg=0.02, implicit=True)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    knn: KnnSection = field(default_factory=KnnSection)
    svd: MfConfig = field(default_factory=MfConfig)
    svdpp: MfConfig = field(default_factory=_svdpp_defaults)
    features: FeatureSection = field(default_factory=FeatureSection)
    gbt: GbtConfig = field(default_factory=GbtConfig)

    def section(self, name: str) -> dict:
        return asdict(getattr(self, name))

    def echo(self) -> dict:
        """Everything that can change results; output dir and thread count excluded."""
        out = {f.name: asdict(getattr(self, f.name)) for f in fields(self)}
        out["run"].pop("output")
        out["run"].pop("threads")
        out["run"]["models"] = list(out["run"]["models"])
        return out


# keys the user may not set: fixed by the section they live in
_FIXED = {("svd", "implicit"), ("svdpp", "implicit"), ("baseline", "seed"), ("svd", "seed"), ("svdpp", "seed"),
          ("gbt", "seed")}


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def nearest(word: str, choices) -> str:
    return min(sorted(choices), key=lambda c: edit_distance(word, c))


def _convert(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    return raw


def _settable(cfg: RunConfig) -> dict[str, dict]:
    return {
        f.name: {k: v for k, v in asdict(getattr(cfg, f.name)).items() if (f.name, k) not in _FIXED}
        for f in fields(cfg)
    }


def parse_config(text: str = "", env: Optional[dict] = None) -> RunConfig:
    """Parse config text plus environment overrides; raise ConfigError listing every problem."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    errors: list[str] = []
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from None

    values: dict[tuple[str, str], str] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            values[(section, key)] = raw
    env = os.environ if env is None else env
    for name, raw in env.items():
        if name.startswith(ENV_PREFIX):
            section, _, key = name[len(ENV_PREFIX):].lower().partition("_")
            values[(section, key)] = raw

    cfg = RunConfig()
    allowed = _settable(cfg)
    for (section, key), raw in values.items():
        if section not in allowed:
            errors.append(f"unknown section [{section}] (did you mean [{nearest(section, allowed)}]?)")
            continue
        if key not in allowed[section]:
            errors.append(f"unknown key '{key}' in [{section}] (did you mean '{nearest(key, allowed[section])}'?)")
            continue
        target = getattr(cfg, section)
        try:
            setattr(target, key, _convert(raw, getattr(target, key)))
        except ValueError as exc:
            errors.append(f"[{section}] {key}: {exc}")

    errors += _check(cfg)
    if errors:
        raise ConfigError(errors)
    seed = cfg.run.seed
    cfg.baseline.seed = cfg.svd.seed = cfg.svdpp.seed = cfg.gbt.seed = seed
    cfg.svd.implicit = False
    cfg.svdpp.implicit = True
    return cfg


def _check(cfg: RunConfig) -> list[str]:
    errors = []
    if not 0.0 < cfg.run.train_fraction < 1.0:
        errors.append(f"[run] train_fraction must be in (0, 1), got {cfg.run.train_fraction}")
    if cfg.run.threads < 1:
        errors.append("[run] threads must be >= 1")
    for m in cfg.run.models:
        if m not in ALL_MODELS:
            errors.append(f"[run] models: unknown model '{m}' (did you mean '{nearest(m, ALL_MODELS)}'?)")
    if not cfg.run.models:
        errors.append("[run] models: at least one model required")
    if cfg.data.source not in ("synthetic", "netflix"):
        errors.append(f"[data] source must be 'synthetic' or 'netflix', got '{cfg.data.source}'")
    if cfg.data.source == "netflix":
        if not cfg.data.training_set:
            errors.append("[data] training_set is required when source = netflix")
        elif not Path(cfg.data.training_set).exists():
            errors.append(f"[data] training_set: path does not exist: {cfg.data.training_set}")
        for key in ("movie_titles", "probe"):
            path = getattr(cfg.data, key)
            if path and not Path(path).exists():
                errors.append(f"[data] {key}: path does not exist: {path}")
    s = cfg.synthetic
    if s.users < 1 or s.movies < 1 or s.rank < 0:
        errors.append("[synthetic] users and movies must be >= 1, rank >= 0")
    if not 0.0 < s.density <= 1.0:
        errors.append(f"[synthetic] density must be in (0, 1], got {s.density}")
    if cfg.baseline.method not in ("als", "sgd"):
        errors.append(f"[baseline] method must be 'als' or 'sgd', got '{cfg.baseline.method}'")
    if cfg.baseline.epochs < 1:
        errors.append("[baseline] epochs must be >= 1")
    if cfg.knn.k < 1:
        errors.append("[knn] k must be >= 1")
    if cfg.knn.shrinkage < 0:
        errors.append("[knn] shrinkage must be >= 0")
    for name in ("svd", "svdpp"):
        mf = getattr(cfg, name)
        if mf.factors < 0 or mf.epochs < 1 or mf.lr <= 0 or mf.reg < 0:
            errors.append(f"[{name}] need factors >= 0, epochs >= 1, lr > 0, reg >= 0")
    fs = cfg.features
    if fs.neighbor_feature not in ("similarity", "rating"):
        errors.append(f"[features] neighbor_feature must be 'similarity' or 'rating', got '{fs.neighbor_feature}'")
    if fs.k < 1 or fs.train_sample < 0 or fs.min_support < 1:
        errors.append("[features] need k >= 1, min_support >= 1, train_sample >= 0")
    g = cfg.gbt
    if g.rounds < 1 or g.max_depth < 1 or g.min_leaf < 1 or g.reg_lambda < 0:
        errors.append("[gbt] need rounds >= 1, max_depth >= 1, min_leaf >= 1, reg_lambda >= 0")
    if not 0.0 < g.shrinkage <= 1.0:
        errors.append(f"[gbt] shrinkage must be in (0, 1], got {g.shrinkage}")
    return errors


def validate_config(path=None, env: Optional[dict] = None) -> RunConfig:
    """Load and validate a config file (``None`` means all defaults)."""
    text = Path(path).read_text() if path is not None else ""
    return parse_config(text, env)


def dump_config(cfg: RunConfig) -> str:
    """Render a config back to INI text (round-trips through :func:`parse_config`)."""
    lines = []
    for section, keys in _settable(cfg).items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            if isinstance(value, (tuple, list)):
                value = ", ".join(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
