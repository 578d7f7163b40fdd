"""Scene primitives: Gaussian parameter storage, cameras, and projection.

All geometry is computed in float64. A scene is stored struct-of-arrays
(one array per parameter kind) so the renderer can stay fully vectorized;
the activation conventions are the usual splatting ones (exp for scale,
sigmoid for opacity, unit-normalized quaternion for rotation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

# Real spherical-harmonics constants, bands 0-3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.4453057213202769,
    -0.5900435899266435,
)

NEAR_PLANE = 0.01       # camera-space z at or below this is culled
COV2D_REG = 0.3         # pixels^2 added to the diagonal of every 2D covariance


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotation(q):
    """Rotation matrix of a (w, x, y, z) quaternion, normalized first.

    Accepts a single (4,) quaternion or a batch (N, 4); returns (3, 3)
    or (N, 3, 3). Raises InvalidParameterError on a zero-norm input.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm == 0.0):
        raise InvalidParameterError("zero-norm quaternion has no rotation")
    w, x, y, z = (q / norm[:, None]).T

    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_rotation_grad(q):
    """d(quat_to_rotation)/dq for raw (unnormalized) quaternions.

    Returns (N, 4, 3, 3): entry [n, k] is dR/dq_k including the chain
    through the normalization q_hat = q / |q|.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm == 0.0):
        raise InvalidParameterError("zero-norm quaternion has no rotation")
    qh = q / norm[:, None]
    w, x, y, z = qh.T
    n = q.shape[0]
    zeros = np.zeros(n)

    def mat(rows):
        return 2.0 * np.stack(
            [np.stack(r, axis=-1) for r in rows], axis=-2)

    dR_dw = mat([[zeros, -z, y], [z, zeros, -x], [-y, x, zeros]])
    dR_dx = mat([[zeros, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dR_dy = mat([[-2 * y, x, w], [x, zeros, z], [-w, z, -2 * y]])
    dR_dz = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zeros]])
    dR_dqh = np.stack([dR_dw, dR_dx, dR_dy, dR_dz], axis=1)  # (N,4,3,3)

    # chain through normalization: dqh_j/dq_k = (delta_jk - qh_j qh_k)/|q|
    J = (np.eye(4)[None] - qh[:, :, None] * qh[:, None, :]) / norm[:, None, None]
    return np.einsum('njk,njab->nkab', J, dR_dqh)


def build_covariance(q, log_scale):
    """World covariance R S S^T R^T with S = diag(exp(log_scale)).

    Accepts single (4,)/(3,) inputs or batches (N, 4)/(N, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    R = np.atleast_3d(quat_to_rotation(q))
    if single:
        R = R.reshape(1, 3, 3)
    s = np.exp(np.atleast_2d(np.asarray(log_scale, dtype=np.float64)))
    M = R * s[:, None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return cov[0] if single else cov


def sh_basis(dirs, degree):
    """Real-SH basis values for unit directions, bands 0..degree.

    dirs: (..., 3); returns (..., (degree+1)^2).
    """
    if degree not in (0, 1, 2, 3):
        raise InvalidParameterError(f"sh degree must be in 0..3, got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    k = (degree + 1) ** 2
    out = np.empty(dirs.shape[:-1] + (k,))
    out[..., 0] = SH_C0
    if degree < 1:
        return out
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    if degree < 2:
        return out
    xx, yy, zz = x * x, y * y, z * z
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[1] * y * z
    out[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * x * z
    out[..., 8] = SH_C2[4] * (xx - yy)
    if degree < 3:
        return out
    out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
    out[..., 10] = SH_C3[1] * x * y * z
    out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs, degree):
    """d(sh_basis)/d(dir): (..., (degree+1)^2, 3)."""
    if degree not in (0, 1, 2, 3):
        raise InvalidParameterError(f"sh degree must be in 0..3, got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    k = (degree + 1) ** 2
    g = np.zeros(dirs.shape[:-1] + (k, 3))
    if degree < 1:
        return g
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    g[..., 1, 1] = -SH_C1
    g[..., 2, 2] = SH_C1
    g[..., 3, 0] = -SH_C1
    if degree < 2:
        return g
    xx, yy, zz = x * x, y * y, z * z
    g[..., 4, 0] = SH_C2[0] * y
    g[..., 4, 1] = SH_C2[0] * x
    g[..., 5, 1] = SH_C2[1] * z
    g[..., 5, 2] = SH_C2[1] * y
    g[..., 6, 0] = SH_C2[2] * -2 * x
    g[..., 6, 1] = SH_C2[2] * -2 * y
    g[..., 6, 2] = SH_C2[2] * 4 * z
    g[..., 7, 0] = SH_C2[3] * z
    g[..., 7, 2] = SH_C2[3] * x
    g[..., 8, 0] = SH_C2[4] * 2 * x
    g[..., 8, 1] = SH_C2[4] * -2 * y
    if degree < 3:
        return g
    g[..., 9, 0] = SH_C3[0] * 6 * x * y
    g[..., 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
    g[..., 10, 0] = SH_C3[1] * y * z
    g[..., 10, 1] = SH_C3[1] * x * z
    g[..., 10, 2] = SH_C3[1] * x * y
    g[..., 11, 0] = SH_C3[2] * -2 * x * y
    g[..., 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
    g[..., 11, 2] = SH_C3[2] * 8 * y * z
    g[..., 12, 0] = SH_C3[3] * -6 * x * z
    g[..., 12, 1] = SH_C3[3] * -6 * y * z
    g[..., 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
    g[..., 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
    g[..., 13, 1] = SH_C3[4] * -2 * x * y
    g[..., 13, 2] = SH_C3[4] * 8 * x * z
    g[..., 14, 0] = SH_C3[5] * 2 * x * z
    g[..., 14, 1] = SH_C3[5] * -2 * y * z
    g[..., 14, 2] = SH_C3[5] * (xx - yy)
    g[..., 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
    g[..., 15, 1] = SH_C3[6] * -6 * x * y
    return g


def eval_sh(sh_coeffs, dirs, degree):
    """Evaluate SH color for unit view directions.

    sh_coeffs: (..., 3, k) with k = (degree+1)^2; dirs: (..., 3) with
    |dir| = 1 within 1e-6. Returns (..., 3) colors, shifted by +0.5 and
    clamped to >= 0 (the splatting color convention).
    """
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    k = (degree + 1) ** 2
    if sh_coeffs.shape[-1] != k:
        raise InvalidParameterError(
            f"degree {degree} needs {k} coefficients per channel, "
            f"got {sh_coeffs.shape[-1]}")
    nrm = np.linalg.norm(dirs, axis=-1)
    if np.any(np.abs(nrm - 1.0) > 1e-6):
        raise InvalidParameterError("view directions must be unit length")
    basis = sh_basis(dirs, degree)
    raw = np.einsum('...ck,...k->...c', sh_coeffs, basis) + 0.5
    return np.maximum(raw, 0.0)


@dataclass
class Camera:
    """Pinhole camera: intrinsics plus a rigid world-to-camera transform.

    Camera space is x-right, y-down, z-forward; a world point p maps to
    pixel (fx*X/Z + cx, fy*Y/Z + cy) with (X, Y, Z) = R p + t.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.world_to_camera.shape != (3, 4):
            raise InvalidParameterError("world_to_camera must be 3x4")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParameterError("principal point outside the sensor")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise InvalidParameterError("pose rotation block is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidParameterError("pose rotation block must have det +1")

    @property
    def rotation(self):
        return self.world_to_camera[:, :3]

    @property
    def translation(self):
        return self.world_to_camera[:, 3]

    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, position, target, up, fx, fy, cx, cy, width, height,
                timestamp=0.0):
        """Build a camera at ``position`` looking toward ``target``."""
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        fn = np.linalg.norm(forward)
        if fn == 0:
            raise InvalidParameterError("camera position coincides with target")
        forward = forward / fn
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise InvalidParameterError("up direction is parallel to the view axis")
        right = right / rn
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=0)
        # re-orthonormalize so the pose passes the 1e-9 invariant exactly
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        t = -R @ position
        return cls(fx, fy, cx, cy, width, height,
                   np.concatenate([R, t[:, None]], axis=1), timestamp)


@dataclass
class GaussianCloud:
    """Struct-of-arrays scene: N Gaussians with k SH coefficients each.

    positions (N,3), rotations (N,4) quaternions, log_scales (N,3),
    opacity_logits (N,), sh_coeffs (N,3,k). Activated quantities
    (positive scales, (0,1) opacities) come from the accessors.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64)
        n = self.positions.shape[0]
        if (self.positions.shape != (n, 3) or self.rotations.shape != (n, 4)
                or self.log_scales.shape != (n, 3)
                or self.opacity_logits.shape != (n,)
                or self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[:2] != (n, 3)):
            raise InvalidParameterError("inconsistent scene array shapes")
        k = self.sh_coeffs.shape[2]
        if k not in (1, 4, 9, 16):
            raise InvalidParameterError(f"sh coefficient count {k} is not (d+1)^2")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def sh_degree(self):
        return int(np.sqrt(self.sh_coeffs.shape[2])) - 1

    def scales(self):
        return np.exp(self.log_scales)

    def opacities(self):
        return sigmoid(self.opacity_logits)

    def copy(self):
        return GaussianCloud(
            self.positions.copy(), self.rotations.copy(),
            self.log_scales.copy(), self.opacity_logits.copy(),
            self.sh_coeffs.copy())

    def select(self, idx):
        """New cloud holding the subset ``idx`` (keeps order)."""
        return GaussianCloud(
            self.positions[idx], self.rotations[idx], self.log_scales[idx],
            self.opacity_logits[idx], self.sh_coeffs[idx])


@dataclass
class ProjectedGaussians:
    """Frustum-surviving Gaussians after perspective projection.

    Arrays are aligned: entry i describes cloud Gaussian ``index[i]``.
    ``cov2d`` already includes the diagonal regularization. ``color_raw``
    is the SH value before the >= 0 clamp (the backward pass needs the
    clamp mask). Entries are in input order, not depth order.
    """

    index: np.ndarray      # (M,) indices into the source cloud
    depth: np.ndarray      # (M,) camera-space z
    mean2d: np.ndarray     # (M,2) pixel coordinates
    cov2d: np.ndarray      # (M,2,2)
    color: np.ndarray      # (M,3) clamped SH color
    alpha: np.ndarray      # (M,) activated opacity
    t_cam: np.ndarray = None       # (M,3) camera-space means
    dirs: np.ndarray = None        # (M,3) unit view directions
    dir_norm: np.ndarray = None    # (M,) |p - camera center|
    color_raw: np.ndarray = None   # (M,3) SH + 0.5 before clamping

    def __len__(self):
        return self.index.shape[0]


def project_gaussians(cloud: GaussianCloud, cam: Camera,
                      near=NEAR_PLANE, reg=COV2D_REG) -> ProjectedGaussians:
    """Project a cloud through ``cam``; Gaussians behind the near plane
    are culled (they simply do not appear in the result).

    Implements the local-affine splatting projection: camera-space mean
    t = R p + tr, Jacobian J of the pinhole map at t, and
    cov2d = (J R) Sigma (J R)^T + reg * I on the upper-left 2x2 block.
    """
    WR = cam.rotation
    t = cloud.positions @ WR.T + cam.translation
    keep = t[:, 2] > near
    idx = np.flatnonzero(keep)
    t = t[idx]
    tz = t[:, 2]

    mean2d = np.empty((idx.size, 2))
    mean2d[:, 0] = cam.fx * t[:, 0] / tz + cam.cx
    mean2d[:, 1] = cam.fy * t[:, 1] / tz + cam.cy

    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * t[:, 0] / (tz * tz)
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * t[:, 1] / (tz * tz)

    cov3d = build_covariance(cloud.rotations[idx], cloud.log_scales[idx])
    M = J @ WR
    cov2d = np.einsum('nij,njk,nlk->nil', M, cov3d, M)
    cov2d[:, 0, 0] += reg
    cov2d[:, 1, 1] += reg

    v = cloud.positions[idx] - cam.center()
    dn = np.linalg.norm(v, axis=1)
    dirs = v / dn[:, None]
    basis = sh_basis(dirs, cloud.sh_degree)
    color_raw = np.einsum('nck,nk->nc', cloud.sh_coeffs[idx], basis) + 0.5
    color = np.maximum(color_raw, 0.0)

    return ProjectedGaussians(
        index=idx, depth=tz.copy(), mean2d=mean2d, cov2d=cov2d,
        color=color, alpha=sigmoid(cloud.opacity_logits[idx]),
        t_cam=t, dirs=dirs, dir_norm=dn, color_raw=color_raw)
