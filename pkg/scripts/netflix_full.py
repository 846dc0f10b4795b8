"""Full benchmark on the Netflix prize training set.

    python scripts/netflix_full.py /path/to/netflix [--output out-netflix] [--threads N]

The directory must hold ``training_set/`` (or a .zip/.tar of it). Writes the
usual run outputs and prints split counts and the report table.
"""
import argparse
import os
import sys
from pathlib import Path

from netflixrec.config import ConfigError, parse_config
from netflixrec.pipeline import run_pipeline


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", type=Path)
    ap.add_argument("--output", default="out-netflix")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    args = ap.parse_args()

    training = next((p for p in (args.root / "training_set", args.root / "training_set.zip",
                                 args.root / "training_set.tar") if p.exists()), args.root)
    text = f"[data]\nsource = netflix\ntraining_set = {training}\n[run]\noutput = {args.output}\nthreads = {args.threads}\n"
    try:
        cfg = parse_config(text, env=os.environ)
    except ConfigError as exc:
        print("\n".join(exc.errors), file=sys.stderr)
        return 2
    report, status = run_pipeline(cfg, log=lambda m: print(m, file=sys.stderr))
    print(report.to_table())
    return 1 if report.failed else 0


if __name__ == "__main__":
    sys.exit(main())
