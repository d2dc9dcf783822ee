import numpy as np
import pytest

from featservo.geometry import CameraIntrinsics, Pose, se3_exp


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=160.0, cy=120.0, width=320, height=240)


@pytest.fixture
def target_pose():
    # camera 0.4 m in front of the origin, optical axis through it
    return Pose(np.eye(3), (0.0, 0.0, -0.4))


def random_pose(rng, trans_scale=1.0, angle_scale=np.pi / 2):
    """Random pose via the exponential map; rotation angle < angle_scale."""
    xi = np.concatenate(
        [
            rng.uniform(-trans_scale, trans_scale, 3),
            rng.uniform(-1, 1, 3) * angle_scale / np.sqrt(3),
        ]
    )
    return se3_exp(xi)
