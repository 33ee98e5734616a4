import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from ephemvo.geometry import CameraModel, Pose


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def cam():
    return CameraModel(fx=300.0, fy=300.0, cx=319.5, cy=127.5, baseline=0.5, width=640, height=256)


def random_pose(rng, max_translation=5.0):
    """Random pose from an independent rotation source (scipy)."""
    r = Rotation.random(random_state=np.random.RandomState(rng.integers(0, 2**31 - 1)))
    t = rng.uniform(-max_translation, max_translation, 3)
    return Pose(r.as_matrix(), t)
