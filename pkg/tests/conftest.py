import numpy as np
import pytest

from vloc.geometry import Pose


def random_pose(rng, t_scale=2.0):
    q = rng.normal(0.0, 1.0, 4)
    while np.linalg.norm(q) < 1e-6:
        q = rng.normal(0.0, 1.0, 4)
    return Pose(rng.normal(0.0, t_scale, 3), q)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
