"""Movie-rating predictors (baselines, KNN, matrix factorization, boosted
trees) and a benchmark harness over Netflix-prize-format data."""

from .config import RunConfig, parse_config, validate_config
from .dataset import RatingStore, SparseRatingMatrix, build_matrix, parse_training_set, temporal_split
from .evaluation import EvalReport, benchmark, evaluate, mape, rmse
from .pipeline import Pipeline, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "parse_config", "validate_config",
    "RatingStore", "SparseRatingMatrix", "build_matrix", "parse_training_set", "temporal_split",
    "EvalReport", "benchmark", "evaluate", "mape", "rmse",
    "Pipeline", "run_pipeline",
]
