import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hmfgcl.data import RawInteraction, build_matrix

ROOT = Path(__file__).resolve().parents[1]


def ml100k_path() -> Path:
    env = os.environ.get("HMFGCL_DATA_DIR")
    base = Path(env) if env else ROOT / "data"
    return base / "ml-100k" / "u.data"


@pytest.fixture(scope="session")
def ml100k_file():
    path = ml100k_path()
    if not path.exists():
        subprocess.run([sys.executable, str(ROOT / "scripts" / "fetch_ml100k.py"), "--out", str(path)],
                       check=True)
    return path


def random_interactions(n_users, n_items, density, seed):
    rng = np.random.default_rng(seed)
    out = []
    for u in range(n_users):
        row = np.flatnonzero(rng.random(n_items) < density)
        if len(row) == 0:
            row = [int(rng.integers(n_items))]
        for v in row:
            out.append(RawInteraction(f"u{u}", f"i{v}", float(rng.integers(1, 6)), 1000 + len(out)))
    return out


@pytest.fixture
def toy_matrix():
    return build_matrix(random_interactions(30, 40, 0.25, seed=3), seed=0)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
