import os
from pathlib import Path

import numpy as np
import pytest

MNIST_CANDIDATES = [os.environ.get("NATLANGEVIN_MNIST", ""), "/root/data/mnist", str(Path(__file__).parents[1] / "data" / "mnist")]


def mnist_dir():
    for cand in MNIST_CANDIDATES:
        if cand and (Path(cand) / "train-images-idx3-ubyte").exists() or cand and (Path(cand) / "train-images-idx3-ubyte.gz").exists():
            return cand
    return None


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist_path():
    path = mnist_dir()
    if path is None:
        pytest.skip("MNIST IDX files not found; set NATLANGEVIN_MNIST")
    return path


# One line per acceptance criterion, printed after the run.
ACCEPTANCE: dict = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"CRITERION {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, 10):
        terminalreporter.write_line(ACCEPTANCE.get(k, f"CRITERION {k}: NOT RUN"))
