import numpy as np
import pytest

from vesselseg import engine


@pytest.fixture(autouse=True)
def deterministic_engine():
    engine.set_mode(engine.DETERMINISTIC)
    yield
    engine.set_mode(engine.DETERMINISTIC)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
