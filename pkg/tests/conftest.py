import os

import numpy as np
import pytest

from uqsr import parallel


def pytest_configure(config):
    # two workers by default: BLAS-heavy tests gain, determinism tests
    # pin their own thread count through the CLI
    parallel.set_threads(int(os.environ.get("UQSR_THREADS", "2")))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
