import os

import numpy as np
import pytest


def pytest_configure(config):
    # persist simulated quantile tables between runs
    if not os.environ.get("ZOOMIN_CACHE"):
        os.environ["ZOOMIN_CACHE"] = str(config.cache.mkdir("zoomin"))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))
