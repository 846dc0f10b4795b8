"""Command line entry point: ``netflixrec <subcommand> [options]``.

Status and cache messages go to stderr; tables and CSV go to stdout, so
``netflixrec similar ... > out.csv`` captures only the data.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ALL_MODELS, ENV_PREFIX, ConfigError, validate_config
from .dataset import save_store, write_csv
from .evaluation import EvalReport, EvalRow, evaluate
from .features import FeatureTable, write_table
from .modelio import load_model
from .pipeline import Pipeline, StageError, write_report
from .similarity import top_k_similar_movies, top_k_similar_users


def _common() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="INI run configuration")
    p.add_argument("--output", default=argparse.SUPPRESS, help="output directory (overrides [run] output)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker pool size")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="netflixrec",
        parents=[common],
        description="Movie-rating predictors and benchmark over Netflix-format data.",
        epilog=f"Any config key can be overridden with {ENV_PREFIX}<SECTION>_<KEY>=value.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="parse (or generate) ratings into the binary cache") \
        .add_argument("--csv", action="store_true", help="also write ratings.csv")
    sub.add_parser("split", parents=[common], help="temporal train/test split") \
        .add_argument("--csv", action="store_true", help="also write train.csv and test.csv")
    sub.add_parser("eda", parents=[common], help="exploratory statistics (JSON + per-figure CSV)")
    sim = sub.add_parser("similar", parents=[common], help="top-k cosine neighbours of a user or movie")
    sim.add_argument("--kind", choices=("user", "movie"), required=True)
    sim.add_argument("--id", type=int, required=True, help="external user or movie id")
    sim.add_argument("--k", type=int, default=10)
    sub.add_parser("features", parents=[common], help="write train/test feature CSVs")
    tr = sub.add_parser("train", parents=[common], help="fit one model and save it")
    tr.add_argument("--model", choices=ALL_MODELS, required=True)
    ev = sub.add_parser("evaluate", parents=[common], help="score one model on the test split")
    group = ev.add_mutually_exclusive_group(required=True)
    group.add_argument("--model", choices=ALL_MODELS)
    group.add_argument("--model-file", help="saved model file")
    bm = sub.add_parser("benchmark", parents=[common], help="score several models")
    bm.add_argument("--models", help="comma-separated list (default: [run] models)")
    sub.add_parser("run", parents=[common], help="every stage, end to end")
    return parser


def load_config(args: argparse.Namespace):
    env = dict(os.environ)
    for flag, key in (("output", "RUN_OUTPUT"), ("threads", "RUN_THREADS"), ("seed", "RUN_SEED")):
        if hasattr(args, flag):
            env[ENV_PREFIX + key] = str(getattr(args, flag))
    return validate_config(getattr(args, "config", None), env)


def _external_table(table: FeatureTable, users, movies) -> FeatureTable:
    return FeatureTable(table.X, table.names, np.asarray(users), np.asarray(movies), table.targets, table.padded)


def cmd_ingest(p: Pipeline, args) -> int:
    store = p.ingest()
    p.out.mkdir(parents=True, exist_ok=True)
    save_store(store, p.out / "ratings.nflx", fingerprint=p.ingest_key())
    if args.csv:
        write_csv(store, p.out / "ratings.csv")
    print(f"ratings={len(store)} users={store.n_users} movies={store.n_movies}")
    return 0


def cmd_split(p: Pipeline, args) -> int:
    train, test = p.split()
    p.out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("test", test)):
        save_store(part, p.out / f"{name}.nflx", fingerprint=p.split_key())
        if args.csv:
            write_csv(part, p.out / f"{name}.csv")
        print(f"{name}: ratings={len(part)} users={part.n_users} movies={part.n_movies}")
    return 0


def cmd_eda(p: Pipeline, args) -> int:
    report = p.eda()
    print(f"sparsity={report['sparsity_percent']}% written to {p.out / 'eda'}")
    return 0


def cmd_similar(p: Pipeline, args) -> int:
    m = p.matrix()
    index = m.user_ids if args.kind == "user" else m.movie_ids
    other = m.user_ids if args.kind == "user" else m.movie_ids
    dense = int(index.to_dense([args.id])[0])
    if dense < 0:
        print(f"error: {args.kind} {args.id} has no training ratings", file=sys.stderr)
        return 1
    find = top_k_similar_users if args.kind == "user" else top_k_similar_movies
    nl = find(dense, m, args.k)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["neighbor_id", "score"])
    for ext, score in zip(other.to_external(nl.ids), nl.scores):
        w.writerow([int(ext), repr(float(score))])
    return 0


def cmd_features(p: Pipeline, args) -> int:
    train, test = p.split()
    m = p.matrix()
    table = p.features()
    directory = p.out / "features"
    directory.mkdir(parents=True, exist_ok=True)
    write_table(_external_table(table, m.user_ids.to_external(table.users), m.movie_ids.to_external(table.movies)),
                directory / "train.csv")
    users = m.user_ids.to_dense(test.users)
    movies = m.movie_ids.to_dense(test.movies)
    test_table = p.builder().table(users, movies, test.ratings.astype(np.float64))
    write_table(_external_table(test_table, test.users, test.movies), directory / "test.csv")
    print(f"train rows={len(table)} test rows={len(test_table)} written to {directory}")
    return 0


def cmd_train(p: Pipeline, args) -> int:
    models = p.train([args.model])
    model = models[args.model]
    if isinstance(model, BaseException):
        print(f"error: {args.model}: {type(model).__name__}: {model}", file=sys.stderr)
        return 1
    directory = p.out / "models"
    directory.mkdir(parents=True, exist_ok=True)
    src = p.cache_dir / f"model-{args.model}-{p.model_key(args.model)}.nfrm"
    shutil.copyfile(src, directory / f"{args.model}.nfrm")
    print(f"saved {directory / (args.model + '.nfrm')}")
    return 0


def cmd_evaluate(p: Pipeline, args) -> int:
    train, test = p.split()
    if args.model_file:
        name = Path(args.model_file).stem
        try:
            model = load_model(args.model_file, p.matrix())
            row = evaluate(model, test, p.matrix(), name)
        except Exception as exc:
            row = EvalRow(model=name, error=f"{type(exc).__name__}: {exc}")
    else:
        name = args.model
        model = p.train([name])[name]
        if isinstance(model, BaseException):
            row = EvalRow(model=name, error=f"{type(model).__name__}: {model}")
        else:
            row = evaluate(model, test, p.matrix(), name)
    report = EvalReport([row], config=p.config.echo())
    directory = p.out / "evaluate"
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{name}.json").write_text(report.to_json())
    sys.stdout.write(report.to_table())
    return 1 if report.failed else 0


def cmd_benchmark(p: Pipeline, args) -> int:
    names = [n.strip() for n in args.models.split(",")] if args.models else None
    unknown = [n for n in names or () if n not in ALL_MODELS]
    if unknown:
        print(f"error: unknown model(s): {', '.join(unknown)}", file=sys.stderr)
        return 2
    report = p.benchmark(names)
    write_report(report, p.out)
    sys.stdout.write(report.to_table())
    return 1 if report.failed else 0


def cmd_run(p: Pipeline, args) -> int:
    p.ingest()
    p.split()
    p.eda()
    return cmd_benchmark(p, argparse.Namespace(models=None))


COMMANDS = {
    "ingest": cmd_ingest, "split": cmd_split, "eda": cmd_eda, "similar": cmd_similar, "features": cmd_features,
    "train": cmd_train, "evaluate": cmd_evaluate, "benchmark": cmd_benchmark, "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](Pipeline(config), args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
