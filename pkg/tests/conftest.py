import numpy as np
import pytest

from ablreg.geometry import RigidTransform3D, rotvec_to_matrix


def random_rotation_from_quat(rng):
    """Uniform random rotation via a normalized quaternion (independent of
    the package's own random_rotation helper)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_transform(rng, t_scale=50.0):
    return RigidTransform3D(random_rotation_from_quat(rng), rng.uniform(-t_scale, t_scale, 3))
