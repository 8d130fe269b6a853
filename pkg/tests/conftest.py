import numpy as np
import pytest
from hypothesis import settings

from odseg import tensor as T

settings.register_profile("odseg", deadline=None, max_examples=50)
settings.load_profile("odseg")


@pytest.fixture(autouse=True)
def _debug_checks():
    T.set_debug(True)
    yield
    T.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
