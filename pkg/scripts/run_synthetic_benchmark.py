"""Run the default synthetic benchmark twice and check the reports match.

    python scripts/run_synthetic_benchmark.py [--workdir DIR]
"""
import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

from netflixrec.cli import main as cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", type=Path, default=None)
    args = ap.parse_args()
    root = args.workdir or Path(tempfile.mkdtemp(prefix="netflixrec-"))

    reports = []
    for name in ("first", "second"):
        start = time.perf_counter()
        code = cli(["run", "--output", str(root / name)])
        print(f"{name} run: exit {code} in {time.perf_counter() - start:.1f}s", file=sys.stderr)
        if code != 0:
            return code
        reports.append((root / name / "report.json").read_bytes())

    same = reports[0] == reports[1]
    rows = {r["model"]: r for r in json.loads(reports[0])["models"]}
    gain = 1 - rows["svd"]["rmse"] / rows["global-mean"]["rmse"]
    print(f"reports byte-identical: {same}")
    print(f"svd rmse {rows['svd']['rmse']:.4f}, global mean {rows['global-mean']['rmse']:.4f} ({100 * gain:.1f}% better)")
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())
