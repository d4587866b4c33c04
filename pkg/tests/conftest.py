import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA_DIR = os.environ.get("BNNKIT_DATA", os.path.join(ROOT, "data", "mnist"))


def have_mnist():
    return os.path.isdir(DATA_DIR) and any(f.startswith("train-images") for f in os.listdir(DATA_DIR))


@pytest.fixture(scope="session")
def mnist():
    if not have_mnist():
        pytest.fail(f"MNIST not found in {DATA_DIR}; run demos/fetch_mnist.py first")
    from bnnkit import modelio as M
    return M.mnist_splits(DATA_DIR)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
