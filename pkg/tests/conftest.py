import numpy as np
import pytest

from dunets.volterra import make_operator


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_op():
    # 3 windows of size 5 at stride 3 over an 11-point signal
    return make_operator(1.0, seed=7, n=11, k=5, stride=3)
