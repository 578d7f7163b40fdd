import numpy as np
import pytest

from darksplat.scene import Camera, GaussianCloud, logit


def make_camera(width=16, height=16, fx=24.0, distance=3.0, timestamp=0.0,
                angle=0.0):
    """Camera on a horizontal circle looking at the origin."""
    pos = [distance * np.cos(angle), distance * np.sin(angle), 0.5]
    return Camera.look_at(pos, [0, 0, 0], [0, 0, 1], fx=fx, fy=fx,
                          cx=width / 2.0, cy=height / 2.0, width=width,
                          height=height, timestamp=timestamp)


def random_cloud(rng, n=6, sh_degree=1, box=0.6):
    """Small random scene with parameters kept away from activation edges."""
    k = (sh_degree + 1) ** 2
    sh = np.concatenate(
        [rng.uniform(-0.15, 0.15, (n, 3, 1)),
         rng.uniform(-0.08, 0.08, (n, 3, k - 1))], axis=2)
    return GaussianCloud(
        positions=rng.uniform(-box, box, (n, 3)),
        rotations=rng.normal(0.0, 1.0, (n, 4)),
        log_scales=rng.uniform(np.log(0.1), np.log(0.3), (n, 3)),
        opacity_logits=rng.uniform(logit(0.2), logit(0.8), n),
        sh_coeffs=sh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
