"""Depth-ordered alpha-compositing rasterizer with an analytic backward pass.

The forward pass is fully vectorized over (pixel, splat) pairs: every
visible splat contributes to the pixels inside its 3-sigma Mahalanobis
footprint, pairs are ordered pixel-major with depth as the secondary key,
and the front-to-back transmittance products are evaluated as segmented
prefix sums of log(1 - alpha). All accumulation orders are fixed, so
renders and gradients are bit-reproducible run to run.

The backward pass chain-rules a pixel-space loss gradient through the
compositing weights, the 2D Gaussian evaluation, the projection (including
the Jacobian's dependence on the camera-space mean and the view-direction
dependence of SH color), the covariance factorization, and the activations,
yielding gradients for every Gaussian parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, NumericDegeneracyError
from .scene import (Camera, GaussianCloud, ProjectedGaussians, quat_rotation_grad,
                    quat_to_rotation, sh_basis, sh_basis_grad, project_gaussians)

ALPHA_CLAMP = 0.99      # per-splat alpha ceiling
EARLY_STOP_T = 1e-4     # stop compositing once transmittance falls below this
CUTOFF_MAHAL2 = 9.0     # 3-sigma support cutoff (squared Mahalanobis distance)


def sort_by_depth(depths):
    """Ascending stable depth order (ties keep original index order)."""
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0):
        raise InvalidParameterError("depths must be positive")
    return np.argsort(depths, kind="stable")


def splat_weight(mean2d, cov2d, alpha, pixel):
    """Alpha contribution of one projected splat at one pixel coordinate.

    Returns alpha * exp(-0.5 d^T cov2d^-1 d) clamped to [0, 0.99], and 0
    beyond the 3-sigma cutoff.
    """
    cov2d = np.asarray(cov2d, dtype=np.float64)
    det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] * cov2d[1, 0]
    if not np.isfinite(det) or det <= 1e-12:
        raise NumericDegeneracyError("cov2d is singular")
    d = np.asarray(pixel, dtype=np.float64) - np.asarray(mean2d, dtype=np.float64)
    m2 = (cov2d[1, 1] * d[0] * d[0] - 2 * cov2d[0, 1] * d[0] * d[1]
          + cov2d[0, 0] * d[1] * d[1]) / det
    if m2 > CUTOFF_MAHAL2:
        return 0.0
    return min(float(alpha) * np.exp(-0.5 * m2), ALPHA_CLAMP)


@dataclass
class GradientSet:
    """Per-Gaussian gradients, congruent with the cloud's parameter arrays.

    ``screen_means`` is the accumulated gradient w.r.t. the projected 2D
    means; the densification heuristic thresholds its norm.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    screen_means: np.ndarray

    @classmethod
    def zeros(cls, cloud: GaussianCloud):
        n = len(cloud)
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros_like(cloud.sh_coeffs), np.zeros((n, 2)))

    def add(self, other: "GradientSet"):
        self.positions += other.positions
        self.rotations += other.rotations
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.sh_coeffs += other.sh_coeffs
        self.screen_means += other.screen_means
        return self

    def scale(self, factor):
        self.positions *= factor
        self.rotations *= factor
        self.log_scales *= factor
        self.opacity_logits *= factor
        self.sh_coeffs *= factor
        self.screen_means *= factor
        return self

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in (
            self.positions, self.rotations, self.log_scales,
            self.opacity_logits, self.sh_coeffs))


@dataclass
class RenderGraph:
    """Everything the backward pass needs from one forward render.

    Pair arrays are sorted pixel-major, then front-to-back in depth;
    ``pix`` is the flattened pixel index and ``sp`` indexes the
    depth-sorted projected arrays. ``tpre`` is the transmittance in front
    of each pair and ``include`` marks pairs not dropped by early stop.
    """

    width: int
    height: int
    background: np.ndarray
    proj: ProjectedGaussians     # visible splats, depth-sorted
    icov: np.ndarray             # (M,3) packed inverse cov2d: (a, b, c)
    pix: np.ndarray              # (P,) flat pixel index
    sp: np.ndarray               # (P,) index into proj arrays
    gw: np.ndarray               # (P,) Gaussian falloff weight
    alpha_pair: np.ndarray       # (P,) clamped per-pair alpha
    tpre: np.ndarray             # (P,) transmittance before the pair
    include: np.ndarray          # (P,) bool, False once early-stopped
    t_final: np.ndarray          # (H*W,) transmittance behind all splats
    pre_clip: np.ndarray         # (H,W,3) image before the [0,1] clip

    def pair_weights(self):
        """Compositing weights alpha_i * prod_j<i (1 - alpha_j) per pair."""
        return self.alpha_pair * self.tpre * self.include


def _ragged_arange(starts, counts):
    """Concatenation of arange(s, s + c) for each (s, c), vectorized."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    offs = np.repeat(np.cumsum(counts) - counts, counts)
    return np.arange(total, dtype=np.int64) - offs + np.repeat(starts, counts)


def _segment_starts(sorted_keys):
    """Indices where a new segment begins in a sorted key array."""
    if sorted_keys.size == 0:
        return np.empty(0, dtype=np.int64)
    flags = np.empty(sorted_keys.size, dtype=bool)
    flags[0] = True
    np.not_equal(sorted_keys[1:], sorted_keys[:-1], out=flags[1:])
    return np.flatnonzero(flags)


def render(cloud: GaussianCloud, cam: Camera, background=None):
    """Render the cloud through ``cam``; returns (image, RenderGraph).

    The image is (H, W, 3) float64 in [0, 1]. Pixels are sampled at their
    centers (x + 0.5, y + 0.5). Per pixel the depth-sorted splats are
    composited front to back; once accumulated transmittance drops below
    1e-4 the remaining splats are skipped, and whatever transmittance is
    left multiplies the background color.
    """
    if background is None:
        background = np.zeros(3)
    background = np.asarray(background, dtype=np.float64)
    H, W = cam.height, cam.width

    proj = project_gaussians(cloud, cam)
    order = sort_by_depth(proj.depth) if len(proj) else np.empty(0, dtype=np.int64)
    proj = ProjectedGaussians(
        index=proj.index[order], depth=proj.depth[order],
        mean2d=proj.mean2d[order], cov2d=proj.cov2d[order],
        color=proj.color[order], alpha=proj.alpha[order],
        t_cam=proj.t_cam[order], dirs=proj.dirs[order],
        dir_norm=proj.dir_norm[order], color_raw=proj.color_raw[order])

    cov = proj.cov2d
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    if np.any(det <= 1e-12):
        raise NumericDegeneracyError("regularized cov2d is singular")
    icov = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det,
                     cov[:, 0, 0] / det], axis=1)

    # 3-sigma axis-aligned footprint, clipped to the image
    rx = 3.0 * np.sqrt(cov[:, 0, 0])
    ry = 3.0 * np.sqrt(cov[:, 1, 1])
    x0 = np.maximum(np.ceil(proj.mean2d[:, 0] - rx - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.floor(proj.mean2d[:, 0] + rx - 0.5), W - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(proj.mean2d[:, 1] - ry - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.floor(proj.mean2d[:, 1] + ry - 0.5), H - 1).astype(np.int64)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)

    row_sp = np.repeat(np.arange(len(proj), dtype=np.int64), bh)
    row_y = _ragged_arange(y0, bh)
    pair_w = bw[row_sp]
    sp = np.repeat(row_sp, pair_w)
    py = np.repeat(row_y, pair_w)
    px = _ragged_arange(x0[row_sp], pair_w)

    dx = (px + 0.5) - proj.mean2d[sp, 0]
    dy = (py + 0.5) - proj.mean2d[sp, 1]
    m2 = (icov[sp, 0] * dx * dx + 2.0 * icov[sp, 1] * dx * dy
          + icov[sp, 2] * dy * dy)
    inside = m2 <= CUTOFF_MAHAL2
    sp, px, py, m2 = sp[inside], px[inside], py[inside], m2[inside]

    gw = np.exp(-0.5 * m2)
    alpha_pair = np.minimum(proj.alpha[sp] * gw, ALPHA_CLAMP)

    flat = py * W + px
    order_pix = np.argsort(flat, kind="stable")   # depth stays secondary
    flat = flat[order_pix]
    sp = sp[order_pix]
    gw = gw[order_pix]
    alpha_pair = alpha_pair[order_pix]

    lg = np.log1p(-alpha_pair)
    cs = np.cumsum(lg)
    excl = cs - lg
    starts = _segment_starts(flat)
    if starts.size:
        counts = np.diff(np.append(starts, flat.size))
        excl -= np.repeat(excl[starts], counts)
    tpre = np.exp(excl)
    include = tpre >= EARLY_STOP_T
    weights = alpha_pair * tpre * include

    acc = np.zeros((H * W, 3))
    for ch in range(3):
        acc[:, ch] = np.bincount(flat, weights=weights * proj.color[sp, ch],
                                 minlength=H * W)
    t_final = np.exp(np.bincount(flat, weights=lg * include, minlength=H * W))

    pre_clip = (acc + t_final[:, None] * background[None, :]).reshape(H, W, 3)
    image = np.clip(pre_clip, 0.0, 1.0)

    graph = RenderGraph(
        width=W, height=H, background=background, proj=proj, icov=icov,
        pix=flat, sp=sp, gw=gw, alpha_pair=alpha_pair, tpre=tpre,
        include=include, t_final=t_final, pre_clip=pre_clip)
    return image, graph


def backward(graph: RenderGraph, d_image, cloud: GaussianCloud, cam: Camera):
    """Gradients of a scalar loss w.r.t. every Gaussian parameter.

    ``d_image`` is the loss gradient w.r.t. the rendered image, shaped
    (H, W, 3). The graph must come from ``render`` on the same scene and
    camera; mutating the scene in between is not detected and yields
    garbage gradients.
    """
    d_image = np.asarray(d_image, dtype=np.float64)
    H, W = graph.height, graph.width
    if d_image.shape != (H, W, 3):
        raise InvalidParameterError("d_image shape does not match the render")

    grads = GradientSet.zeros(cloud)
    proj = graph.proj
    M = len(proj)
    if M == 0:
        return grads

    # gradient through the final [0,1] clip (upper side only; the lower
    # bound is never active because compositing output is non-negative)
    dC = (d_image * (graph.pre_clip < 1.0)).reshape(H * W, 3)

    sp = graph.sp
    pix = graph.pix
    weights = graph.pair_weights()
    dC_pair = dC[pix]                              # (P,3)

    # color gradient: dL/dc_i = sum_pixels w_pair * dC
    d_color = np.empty((M, 3))
    for ch in range(3):
        d_color[:, ch] = np.bincount(sp, weights=weights * dC_pair[:, ch],
                                     minlength=M)

    # alpha gradient via the behind-color S_i = sum_{j>i} c_j w_j + bg*T
    contrib = weights[:, None] * proj.color[sp]    # (P,3)
    total = np.zeros((H * W, 3))
    for ch in range(3):
        total[:, ch] = np.bincount(pix, weights=contrib[:, ch], minlength=H * W)
    cum_incl = np.cumsum(contrib, axis=0)
    starts = _segment_starts(pix)
    counts = np.diff(np.append(starts, pix.size))
    seg_base = np.repeat(cum_incl[starts] - contrib[starts], counts, axis=0)
    cum_incl -= seg_base                           # inclusive within segment
    behind = (total[pix] - cum_incl
              + graph.t_final[pix, None] * graph.background[None, :])

    one_minus = 1.0 - graph.alpha_pair
    d_alpha_pair = np.einsum(
        'pc,pc->p', dC_pair,
        graph.tpre[:, None] * proj.color[sp] - behind / one_minus[:, None])
    d_alpha_pair *= graph.include

    # alpha_pair = min(alpha_i * gw, 0.99)
    unclamped = proj.alpha[sp] * graph.gw < ALPHA_CLAMP
    d_alpha_pair *= unclamped
    d_opacity = np.bincount(sp, weights=d_alpha_pair * graph.gw, minlength=M)
    d_gw = d_alpha_pair * proj.alpha[sp]

    # gw = exp(-0.5 m2), m2 = a dx^2 + 2 b dx dy + c dy^2
    d_m2 = -0.5 * graph.gw * d_gw
    px = (pix % W).astype(np.float64) + 0.5
    py = (pix // W).astype(np.float64) + 0.5
    dx = px - proj.mean2d[sp, 0]
    dy = py - proj.mean2d[sp, 1]
    a, b, c = graph.icov[sp, 0], graph.icov[sp, 1], graph.icov[sp, 2]

    d_mean = np.empty((M, 2))
    d_mean[:, 0] = np.bincount(sp, weights=d_m2 * -2.0 * (a * dx + b * dy),
                               minlength=M)
    d_mean[:, 1] = np.bincount(sp, weights=d_m2 * -2.0 * (b * dx + c * dy),
                               minlength=M)

    d_icov = np.empty((M, 2, 2))
    d_icov[:, 0, 0] = np.bincount(sp, weights=d_m2 * dx * dx, minlength=M)
    d_icov[:, 0, 1] = np.bincount(sp, weights=d_m2 * dx * dy, minlength=M)
    d_icov[:, 1, 0] = d_icov[:, 0, 1]
    d_icov[:, 1, 1] = np.bincount(sp, weights=d_m2 * dy * dy, minlength=M)

    icov_full = np.empty((M, 2, 2))
    icov_full[:, 0, 0] = graph.icov[:, 0]
    icov_full[:, 0, 1] = icov_full[:, 1, 0] = graph.icov[:, 1]
    icov_full[:, 1, 1] = graph.icov[:, 2]
    d_cov2d = -icov_full @ d_icov @ icov_full

    # cov2d = (J W_R) Sigma (J W_R)^T + reg I
    WR = cam.rotation
    tz = proj.t_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    J = np.zeros((M, 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * proj.t_cam[:, 0] / (tz * tz)
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * proj.t_cam[:, 1] / (tz * tz)
    JW = J @ WR

    quats = cloud.rotations[proj.index]
    R = quat_to_rotation(quats)
    s = np.exp(cloud.log_scales[proj.index])
    N = R * s[:, None, :]
    sigma = N @ np.swapaxes(N, 1, 2)

    d_sigma = np.einsum('nji,njk,nkl->nil', JW, d_cov2d, JW)
    d_JW = (d_cov2d + np.swapaxes(d_cov2d, 1, 2)) @ JW @ sigma
    d_J = d_JW @ WR.T

    # J and mean2d both depend on the camera-space mean t
    inv_z2 = 1.0 / (tz * tz)
    d_t = np.empty((M, 3))
    d_t[:, 0] = d_J[:, 0, 2] * -fx * inv_z2
    d_t[:, 1] = d_J[:, 1, 2] * -fy * inv_z2
    d_t[:, 2] = (d_J[:, 0, 0] * -fx * inv_z2
                 + d_J[:, 1, 1] * -fy * inv_z2
                 + d_J[:, 0, 2] * 2.0 * fx * proj.t_cam[:, 0] / (tz ** 3)
                 + d_J[:, 1, 2] * 2.0 * fy * proj.t_cam[:, 1] / (tz ** 3))
    d_t[:, 0] += d_mean[:, 0] * fx / tz
    d_t[:, 1] += d_mean[:, 1] * fy / tz
    d_t[:, 2] += (d_mean[:, 0] * -fx * proj.t_cam[:, 0] * inv_z2
                  + d_mean[:, 1] * -fy * proj.t_cam[:, 1] * inv_z2)
    d_pos = d_t @ WR

    # SH color: clamp mask, coefficient gradient, view-direction gradient
    clamp_mask = proj.color_raw > 0.0
    d_raw = d_color * clamp_mask
    degree = cloud.sh_degree
    basis = sh_basis(proj.dirs, degree)
    d_sh = d_raw[:, :, None] * basis[:, None, :]
    d_basis = sh_basis_grad(proj.dirs, degree)
    sh_vis = cloud.sh_coeffs[proj.index]
    d_dir = np.einsum('nc,nck,nkd->nd', d_raw, sh_vis, d_basis)
    proj_perp = (np.eye(3)[None] - proj.dirs[:, :, None] * proj.dirs[:, None, :])
    d_pos += np.einsum('nij,nj->ni', proj_perp, d_dir) / proj.dir_norm[:, None]

    # Sigma = (R S)(R S)^T: gradients for quaternion and log-scale
    d_N = (d_sigma + np.swapaxes(d_sigma, 1, 2)) @ N
    d_R = d_N * s[:, None, :]
    d_s = np.einsum('nab,nab->nb', d_N, R)
    d_log_scale = d_s * s
    dR_dq = quat_rotation_grad(quats)
    d_quat = np.einsum('nab,nkab->nk', d_R, dR_dq)

    d_logit = d_opacity * proj.alpha * (1.0 - proj.alpha)

    # each visible Gaussian appears exactly once, so plain indexed stores
    grads.positions[proj.index] = d_pos
    grads.rotations[proj.index] = d_quat
    grads.log_scales[proj.index] = d_log_scale
    grads.opacity_logits[proj.index] = d_logit
    grads.sh_coeffs[proj.index] = d_sh
    grads.screen_means[proj.index] = d_mean
    return grads
