import numpy as np
import pytest

from nddepth.synthetic import default_spec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_scene():
    return generate(default_spec())
