import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_spd(rng, d, ridge=0.5):
    a = rng.standard_normal((d, d))
    return a @ a.T + ridge * np.eye(d)
