import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darksplat.errors import InvalidParameterError
from darksplat.scene import (SH_C0, SH_C1, Camera, GaussianCloud,
                             build_covariance, eval_sh, project_gaussians,
                             quat_to_rotation, quat_rotation_grad, sh_basis,
                             sh_basis_grad)

from conftest import make_camera, random_cloud


def test_identity_quaternion():
    assert np.allclose(quat_to_rotation([1, 0, 0, 0]), np.eye(3))


def test_scaled_identity_quaternion_normalizes():
    assert np.allclose(quat_to_rotation([2, 0, 0, 0]), np.eye(3))


def test_quarter_turn_about_z():
    s = np.sqrt(2) / 2
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(quat_to_rotation([s, 0, 0, s]), expected)


def test_zero_quaternion_rejected():
    with pytest.raises(InvalidParameterError):
        quat_to_rotation([0.0, 0.0, 0.0, 0.0])


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3))
@settings(max_examples=50, deadline=None)
def test_quaternion_double_cover(q):
    q = np.asarray(q)
    assert np.allclose(quat_to_rotation(q), quat_to_rotation(-q), atol=1e-12)


def test_rotation_is_orthonormal(rng):
    q = rng.normal(0, 1, (64, 4))
    R = quat_to_rotation(q)
    eye = np.einsum("nij,nkj->nik", R, R)
    assert np.allclose(eye, np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_quat_rotation_grad_matches_fd(rng):
    q = rng.normal(0, 1, (8, 4))
    grad = quat_rotation_grad(q)
    h = 1e-7
    for k in range(4):
        qp, qm = q.copy(), q.copy()
        qp[:, k] += h
        qm[:, k] -= h
        fd = (quat_to_rotation(qp) - quat_to_rotation(qm)) / (2 * h)
        assert np.allclose(grad[:, k], fd, atol=1e-6)


def test_covariance_identity_rotation():
    cov = build_covariance([1, 0, 0, 0], [0.0, np.log(2), np.log(3)])
    assert np.allclose(cov, np.diag([1.0, 4.0, 9.0]))


def test_covariance_quarter_turn():
    s = np.sqrt(2) / 2
    cov = build_covariance([s, 0, 0, s], [0.0, np.log(2), 0.0])
    assert np.allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_covariance_symmetric_psd(rng):
    q = rng.normal(0, 1, (32, 4))
    ls = rng.uniform(-2, 1, (32, 3))
    cov = build_covariance(q, ls)
    assert np.allclose(cov, np.swapaxes(cov, 1, 2))
    assert np.all(np.linalg.eigvalsh(cov) >= -1e-12)


def test_covariance_eigenvalues_are_squared_scales(rng):
    q = rng.normal(0, 1, (32, 4))
    ls = rng.uniform(-2, 1, (32, 3))
    eig = np.sort(np.linalg.eigvalsh(build_covariance(q, ls)), axis=1)
    expected = np.sort(np.exp(2 * ls), axis=1)
    assert np.allclose(eig, expected, atol=1e-9)


def test_sh_degree0_constant_shift():
    coeffs = np.full((3, 1), 0.7)
    for d in ([0, 0, 1], [1, 0, 0], [0.6, -0.8, 0]):
        col = eval_sh(coeffs, np.asarray(d, dtype=float), 0)
        assert np.allclose(col, 0.7 * SH_C0 + 0.5)


def test_sh_degree1_z_band():
    coeffs = np.zeros((3, 4))
    coeffs[:, 2] = 0.3   # z band
    up = eval_sh(coeffs, np.array([0.0, 0.0, 1.0]), 1)
    down = eval_sh(coeffs, np.array([0.0, 0.0, -1.0]), 1)
    assert np.allclose(up - down, 2 * SH_C1 * 0.3)


def test_sh_coefficient_count_mismatch():
    with pytest.raises(InvalidParameterError):
        eval_sh(np.zeros((3, 4)), np.array([0.0, 0.0, 1.0]), 0)


def test_sh_requires_unit_direction():
    with pytest.raises(InvalidParameterError):
        eval_sh(np.zeros((3, 1)), np.array([0.0, 0.0, 2.0]), 0)


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_sh_basis_grad_matches_fd(rng, degree):
    dirs = rng.normal(0, 1, (5, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    grad = sh_basis_grad(dirs, degree)
    h = 1e-7
    for axis in range(3):
        dp, dm = dirs.copy(), dirs.copy()
        dp[:, axis] += h
        dm[:, axis] -= h
        fd = (sh_basis(dp, degree) - sh_basis(dm, degree)) / (2 * h)
        assert np.allclose(grad[..., axis], fd, atol=1e-6)


def test_projection_jacobian_example():
    # Gaussian at camera-space (0, 0, 2), unit covariance, fx = fy = 100
    cloud = GaussianCloud(
        positions=np.array([[0.0, 0.0, 2.0]]),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        log_scales=np.zeros((1, 3)),
        opacity_logits=np.zeros(1),
        sh_coeffs=np.zeros((1, 3, 1)))
    cam = Camera(100.0, 100.0, 32.0, 32.0, 64, 64,
                 np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1))
    proj = project_gaussians(cloud, cam)
    assert len(proj) == 1
    assert np.allclose(proj.mean2d[0], [32.0, 32.0])
    assert np.allclose(proj.cov2d[0], np.diag([2500.3, 2500.3]))
    assert np.isclose(proj.depth[0], 2.0)


def test_projection_culls_behind_camera():
    cloud = GaussianCloud(
        positions=np.array([[0.0, 0.0, -1.0]]),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        log_scales=np.zeros((1, 3)),
        opacity_logits=np.zeros(1),
        sh_coeffs=np.zeros((1, 3, 1)))
    cam = Camera(100.0, 100.0, 32.0, 32.0, 64, 64,
                 np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1))
    assert len(project_gaussians(cloud, cam)) == 0


def test_projection_equivariance_under_rigid_motion(rng):
    from darksplat.scene import quat_to_rotation as q2r
    cloud = random_cloud(rng, n=5)
    cam = make_camera()

    q0 = rng.normal(0, 1, 4)
    R0 = q2r(q0)
    t0 = rng.normal(0, 1, 3)

    # rotate the world: p' = R0 p + t0, and compose the camera accordingly
    moved = GaussianCloud(
        positions=cloud.positions @ R0.T + t0,
        rotations=_quat_mul(q0 / np.linalg.norm(q0), cloud.rotations),
        log_scales=cloud.log_scales.copy(),
        opacity_logits=cloud.opacity_logits.copy(),
        sh_coeffs=cloud.sh_coeffs.copy())
    WR = cam.rotation @ R0.T
    Wt = cam.translation - cam.rotation @ R0.T @ t0
    cam2 = Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
                  np.concatenate([WR, Wt[:, None]], axis=1), cam.timestamp)

    a = project_gaussians(cloud, cam)
    b = project_gaussians(moved, cam2)
    assert np.array_equal(a.index, b.index)
    assert np.allclose(a.mean2d, b.mean2d, atol=1e-7)
    assert np.allclose(a.cov2d, b.cov2d, atol=1e-7)


def _quat_mul(q, quats):
    w1, x1, y1, z1 = q
    w2, x2, y2, z2 = quats.T
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2], axis=1)


def test_camera_validation():
    with pytest.raises(InvalidParameterError):
        Camera(-1.0, 1.0, 8.0, 8.0, 16, 16,
               np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1))
    with pytest.raises(InvalidParameterError):
        Camera(10.0, 10.0, 99.0, 8.0, 16, 16,
               np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1))
    bad = np.concatenate([np.eye(3) * 1.001, np.zeros((3, 1))], axis=1)
    with pytest.raises(InvalidParameterError):
        Camera(10.0, 10.0, 8.0, 8.0, 16, 16, bad)


def test_cloud_shape_validation():
    with pytest.raises(InvalidParameterError):
        GaussianCloud(np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((2, 3)),
                      np.zeros(2), np.zeros((2, 3, 1)))


def test_cloud_activations(rng):
    cloud = random_cloud(rng)
    assert np.all(cloud.scales() > 0)
    assert np.all((cloud.opacities() > 0) & (cloud.opacities() < 1))
    assert cloud.sh_degree == 1
