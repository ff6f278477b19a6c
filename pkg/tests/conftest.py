import os

import numpy as np
import pytest

from capsroute import tensor as T
from capsroute.memory import tune_allocator

tune_allocator()

MNIST_DIR = os.environ.get("CAPSROUTE_MNIST", "/root/data/mnist")
SMALLNORB_DIR = os.environ.get("CAPSROUTE_SMALLNORB", "")


def have_mnist():
    return os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte")) or os.path.exists(
        os.path.join(MNIST_DIR, "train-images-idx3-ubyte.gz"))


@pytest.fixture
def f64():
    with T.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir():
    if not have_mnist():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set CAPSROUTE_MNIST)")
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    """(train, test) MNIST batches, loaded once per session."""
    from capsroute.data import load_mnist

    return load_mnist(mnist_dir)


# acceptance criteria: number -> list of (part, passed, detail)
CRITERIA = {}


def record_criterion(number, part, passed, detail):
    CRITERIA.setdefault(number, []).append((part, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(CRITERIA):
        parts = CRITERIA[number]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        details = "; ".join(f"{part}: {'ok' if ok else 'FAILED'} ({detail})" for part, ok, detail in parts)
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {details}")
