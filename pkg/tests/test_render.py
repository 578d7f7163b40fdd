import numpy as np
import pytest

from darksplat.errors import InvalidParameterError, NumericDegeneracyError
from darksplat.render import (ALPHA_CLAMP, backward, render, sort_by_depth,
                              splat_weight)
from darksplat.scene import SH_C0, Camera, GaussianCloud, logit

from conftest import make_camera, random_cloud


def _axis_cloud(positions, colors, opacities, scale=0.5):
    """Degree-0 cloud with exact base colors."""
    n = len(positions)
    sh = (np.asarray(colors, dtype=float)[:, :, None] - 0.5) / SH_C0
    return GaussianCloud(
        positions=np.asarray(positions, dtype=float),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
        log_scales=np.full((n, 3), np.log(scale)),
        opacity_logits=logit(np.asarray(opacities, dtype=float)),
        sh_coeffs=sh)


def _frontal_camera(width=3, height=3, fx=10.0):
    pose = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
    return Camera(fx, fx, width / 2.0, height / 2.0, width, height, pose)


class TestSortByDepth:
    def test_ascending(self):
        assert sort_by_depth([3.0, 1.0, 2.0]).tolist() == [1, 2, 0]

    def test_empty(self):
        assert sort_by_depth([]).tolist() == []

    def test_stable_ties(self):
        assert sort_by_depth([2.0, 2.0]).tolist() == [0, 1]

    def test_rejects_nonpositive(self):
        with pytest.raises(InvalidParameterError):
            sort_by_depth([1.0, 0.0])


class TestSplatWeight:
    def test_center_hits_alpha(self):
        assert splat_weight([4.0, 4.0], np.eye(2), 0.7, [4.0, 4.0]) == pytest.approx(0.7)

    def test_center_clamped(self):
        assert splat_weight([4.0, 4.0], np.eye(2), 0.999, [4.0, 4.0]) == ALPHA_CLAMP

    def test_quadratic_form(self):
        w = splat_weight([0.0, 0.0], np.eye(2), 1.0, [np.sqrt(2), 0.0])
        assert w == pytest.approx(np.exp(-1.0), abs=1e-12)

    def test_cutoff(self):
        assert splat_weight([0.0, 0.0], np.eye(2), 1.0, [4.0, 0.0]) == 0.0

    def test_singular_cov(self):
        with pytest.raises(NumericDegeneracyError):
            splat_weight([0.0, 0.0], np.zeros((2, 2)), 1.0, [0.0, 0.0])


class TestRender:
    def test_empty_scene_is_background(self):
        cloud = _axis_cloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
        cam = _frontal_camera()
        img, _ = render(cloud, cam, background=[0.2, 0.4, 0.6])
        assert np.allclose(img, [0.2, 0.4, 0.6])

    def test_single_splat_center_pixel(self):
        # opacity saturates past the clamp; pixel dead-center on the splat
        cloud = _axis_cloud([[0.0, 0.0, 2.0]], [[0.8, 0.6, 0.4]], [0.999])
        cam = _frontal_camera()
        img, _ = render(cloud, cam)
        center = img[1, 1]
        assert np.allclose(center, 0.99 * np.array([0.8, 0.6, 0.4]), atol=1e-9)

    def test_two_coincident_splats(self):
        pos = [[0.0, 0.0, 2.0], [0.0, 0.0, 2.0]]
        cloud = _axis_cloud(pos, [[0.8, 0.8, 0.8], [0.2, 0.2, 0.2]],
                            [0.5, 0.5], scale=1.0)
        bg = np.array([0.1, 0.1, 0.1])
        img, _ = render(cloud, _frontal_camera(), background=bg)
        expected = 0.5 * 0.8 + 0.25 * 0.2 + 0.25 * 0.1
        assert np.allclose(img[1, 1], expected, atol=1e-9)

    def test_energy_conservation(self, rng):
        for _ in range(5):
            cloud = random_cloud(rng, n=8)
            cam = make_camera()
            _, graph = render(cloud, cam)
            total = np.bincount(graph.pix, weights=graph.pair_weights(),
                                minlength=cam.width * cam.height)
            assert np.abs(total + graph.t_final - 1.0).max() < 1e-9

    def test_image_in_range_and_deterministic(self, rng):
        cloud = random_cloud(rng, n=8)
        cam = make_camera()
        img1, _ = render(cloud, cam)
        img2, _ = render(cloud, cam)
        assert np.array_equal(img1, img2)
        assert img1.min() >= 0.0 and img1.max() <= 1.0

    def test_transmittance_nonincreasing_per_pixel(self, rng):
        cloud = random_cloud(rng, n=8)
        _, graph = render(cloud, make_camera())
        # within each pixel segment tpre must be non-increasing
        order = np.lexsort((np.arange(len(graph.pix)), graph.pix))
        pix = graph.pix[order]
        tpre = graph.tpre[order]
        same = pix[1:] == pix[:-1]
        assert np.all(tpre[1:][same] <= tpre[:-1][same] + 1e-15)


class TestBackward:
    def test_zero_upstream_zero_grads(self, rng):
        cloud = random_cloud(rng)
        cam = make_camera()
        _, graph = render(cloud, cam)
        g = backward(graph, np.zeros((cam.height, cam.width, 3)), cloud, cam)
        assert not np.any(g.positions)
        assert not np.any(g.rotations)
        assert not np.any(g.log_scales)
        assert not np.any(g.opacity_logits)
        assert not np.any(g.sh_coeffs)

    def test_out_of_frustum_gaussian_gets_no_gradient(self, rng):
        cloud = random_cloud(rng, n=3)
        cloud.positions[1] = [0.0, 0.0, 50.0]   # far behind the rig
        cam = make_camera()
        img, graph = render(cloud, cam)
        g = backward(graph, np.ones_like(img), cloud, cam)
        assert not np.any(g.positions[1])
        assert not np.any(g.sh_coeffs[1])
        assert not np.any(g.opacity_logits[1])

    def test_shape_mismatch_rejected(self, rng):
        cloud = random_cloud(rng)
        cam = make_camera()
        _, graph = render(cloud, cam)
        with pytest.raises(InvalidParameterError):
            backward(graph, np.zeros((4, 4, 3)), cloud, cam)
