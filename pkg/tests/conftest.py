import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from netflixrec.dataset import SparseRatingMatrix  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.register_profile("thorough", deadline=None, max_examples=400,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@st.composite
def rating_matrices(draw, max_users=50, max_movies=30, min_nnz=1):
    """Small random matrices with integer ratings 1..5."""
    m = draw(st.integers(1, max_users))
    n = draw(st.integers(1, max_movies))
    seed = draw(st.integers(0, 2**32 - 1))
    density = draw(st.sampled_from([0.05, 0.15, 0.3, 0.6, 1.0]))
    rng = np.random.default_rng(seed)
    mask = rng.random((m, n)) < density
    flat = np.flatnonzero(mask.ravel())
    if len(flat) < min_nnz:
        flat = rng.choice(m * n, size=min(min_nnz, m * n), replace=False)
    rows, cols = np.divmod(np.sort(flat), n)
    vals = rng.integers(1, 6, len(rows)).astype(float)
    return SparseRatingMatrix(m, n, rows, cols, vals)


# --- one summary line per acceptance criterion ------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = ""
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        prev = _CRITERIA.get(n)
        # a criterion fails if any of its tests fail
        if prev is None or status == "FAIL" or (prev[0] == "SKIP" and status == "PASS"):
            _CRITERIA[n] = (status, item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, name, detail = _CRITERIA[n]
        line = f"criterion {n}: {status} ({name})"
        if detail:
            line += f" - {detail}"
        terminalreporter.write_line(line)
