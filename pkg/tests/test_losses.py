import math

import numpy as np
import pytest

from darksplat.errors import ConfigurationError, InvalidParameterError
from darksplat.events import EventMap, EventModelParams
from darksplat.losses import (CtmbWeights, LossConfig, PseudoBrightProvider,
                              ctmb_attention, ctmb_forward, loss_event,
                              loss_hol, loss_mix, total_loss)

PARAMS = EventModelParams()


def _shifted_pair(rng, shape=(8, 8, 3), low=0.05, high=0.2):
    """Image pair whose per-pixel luminance difference avoids the abs kink."""
    a = rng.uniform(0.2, 0.8, shape)
    sign = rng.choice([-1.0, 1.0], shape[:2])
    offs = rng.uniform(low, high, shape[:2]) * sign
    b = np.clip(a + offs[:, :, None], 0.0, 1.0)
    return a, b


class TestLossHol:
    def test_identical_zero(self, rng):
        img = rng.random((6, 6, 3))
        val, grad = loss_hol(img, img)
        assert val == 0.0 and not np.any(grad)

    def test_uniform_difference(self):
        val, _ = loss_hol(np.full((4, 4, 3), 0.5), np.full((4, 4, 3), 0.25))
        assert val == pytest.approx(0.0625)

    def test_gradient_matches_fd(self, rng):
        a = rng.random((5, 5, 3))
        b = rng.random((5, 5, 3))
        _, grad = loss_hol(a, b)
        h = 1e-6
        idx = (2, 3, 1)
        for _ in range(3):
            a[idx] += h
            lp, _ = loss_hol(a, b)
            a[idx] -= 2 * h
            lm, _ = loss_hol(a, b)
            a[idx] += h
            fd = (lp - lm) / (2 * h)
            assert abs(grad[idx] - fd) / max(abs(fd), 1e-12) < 1e-6
            idx = (idx[0] - 1, idx[1], (idx[2] + 1) % 3)

    def test_dim_mismatch(self):
        with pytest.raises(InvalidParameterError):
            loss_hol(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


class TestLossEvent:
    def test_identical_zero(self, rng):
        m = EventMap(rng.random((6, 6)), "log")
        val, grad = loss_event(m, m)
        assert val == 0.0 and not np.any(grad)

    def test_uniform_difference(self):
        a = EventMap(np.full((4, 4), 0.3), "log")
        b = EventMap(np.full((4, 4), 0.1), "log")
        val, _ = loss_event(a, b)
        assert val == pytest.approx(0.04)

    def test_sign_flip_invariance(self, rng):
        a = EventMap(rng.normal(0, 1, (5, 5)), "log")
        b = EventMap(rng.normal(0, 1, (5, 5)), "log")
        v1, _ = loss_event(a, b)
        v2, _ = loss_event(EventMap(-a.values, "log"),
                           EventMap(-b.values, "log"))
        assert v1 == pytest.approx(v2)

    def test_units_enforced(self):
        counts = EventMap(np.zeros((3, 3), dtype=np.int64), "counts")
        logs = EventMap(np.zeros((3, 3)), "log")
        with pytest.raises(InvalidParameterError):
            loss_event(counts, logs)

    def test_n_views_divides(self, rng):
        a = EventMap(rng.normal(0, 1, (5, 5)), "log")
        b = EventMap(rng.normal(0, 1, (5, 5)), "log")
        v1, g1 = loss_event(a, b, n_views=1)
        v4, g4 = loss_event(a, b, n_views=4)
        assert v4 == pytest.approx(v1 / 4)
        assert np.allclose(g4, g1 / 4)

    def test_gradient_matches_fd(self, rng):
        a = EventMap(rng.normal(0, 1, (5, 5)), "log")
        b = EventMap(rng.normal(0, 1, (5, 5)), "log")
        _, grad = loss_event(a, b)
        h = 1e-6
        a.values[2, 2] += h
        lp, _ = loss_event(a, b)
        a.values[2, 2] -= 2 * h
        lm, _ = loss_event(a, b)
        a.values[2, 2] += h
        fd = (lp - lm) / (2 * h)
        assert abs(grad[2, 2] - fd) / abs(fd) < 1e-7


class TestLossMix:
    def test_renders_equal_brights_zero(self, rng):
        r1, r2 = _shifted_pair(rng)
        val, g1, g2 = loss_mix(r1, r2, r1, r2, PARAMS)
        assert val == 0.0
        assert not np.any(g1) and not np.any(g2)

    def test_both_pairs_constant_zero(self):
        c = np.full((6, 6, 3), 0.4)
        val, _, _ = loss_mix(c, c, c * 0.5, c * 0.5, PARAMS)
        assert val == pytest.approx(0.0)

    def test_half_versus_zero_difference(self):
        r1 = np.full((4, 4, 3), 0.75)
        r2 = np.full((4, 4, 3), 0.25)   # luminance difference exactly 0.5
        b = np.full((4, 4, 3), 0.3)
        val, _, _ = loss_mix(r1, r2, b, b, PARAMS)
        expected = (math.log(0.5 ** 2.2 + 1e-5) - math.log(1e-5)) ** 2
        assert val == pytest.approx(expected, rel=1e-12)
        assert val == pytest.approx(99.73, rel=1e-2)

    def test_swap_invariance(self, rng):
        r1, r2 = _shifted_pair(rng)
        b1, b2 = _shifted_pair(rng)
        v1, _, _ = loss_mix(r1, r2, b1, b2, PARAMS)
        v2, _, _ = loss_mix(r2, r1, b2, b1, PARAMS)
        assert v1 == pytest.approx(v2, rel=1e-12)

    def test_gradients_match_fd(self, rng):
        r1, r2 = _shifted_pair(rng)
        b1, b2 = _shifted_pair(rng)
        _, g1, g2 = loss_mix(r1, r2, b1, b2, PARAMS)
        h = 1e-7
        worst = 0.0
        for img, grad in ((r1, g1), (r2, g2)):
            for idx in [(1, 2, 0), (4, 4, 1), (6, 3, 2)]:
                img[idx] += h
                lp, _, _ = loss_mix(r1, r2, b1, b2, PARAMS)
                img[idx] -= 2 * h
                lm, _, _ = loss_mix(r1, r2, b1, b2, PARAMS)
                img[idx] += h
                fd = (lp - lm) / (2 * h)
                worst = max(worst, abs(grad[idx] - fd) / max(abs(fd), 1e-8))
        assert worst < 1e-5

    def test_dim_mismatch(self):
        with pytest.raises(InvalidParameterError):
            loss_mix(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)),
                     np.zeros((4, 5, 3)), np.zeros((4, 5, 3)), PARAMS)


class TestTotalLoss:
    def test_zero(self):
        assert total_loss(0.0, 0.0, 0.0, LossConfig()) == 0.0

    def test_default_weights(self):
        assert total_loss(1.0, 1.0, 1.0, LossConfig()) == pytest.approx(1.5)

    def test_ablation_limit(self):
        assert total_loss(0.7, 5.0, 9.0, LossConfig(0.0, 0.0)) == pytest.approx(0.7)

    def test_monotone_in_parts(self, rng):
        cfg = LossConfig()
        base = total_loss(0.5, 0.5, 0.5, cfg)
        assert total_loss(0.6, 0.5, 0.5, cfg) >= base
        assert total_loss(0.5, 0.6, 0.5, cfg) >= base
        assert total_loss(0.5, 0.5, 0.6, cfg) >= base

    def test_negative_weights_rejected(self):
        with pytest.raises(InvalidParameterError):
            LossConfig(-0.1, 0.0)


class TestCtmb:
    @pytest.mark.parametrize("shape", [(4, 5, 3), (2, 2, 1), (7, 3, 6)])
    def test_shape_preserved(self, shape, rng):
        f = rng.normal(0, 1, shape)
        w = CtmbWeights.random(shape[2], seed=3)
        assert ctmb_forward(f, w).shape == shape

    def test_attention_rows_sum_to_one(self, rng):
        f = rng.normal(0, 1, (5, 6, 4))
        w = CtmbWeights.random(4, seed=1)
        attn = ctmb_attention(f, w)
        assert attn.shape == (4, 4)
        assert np.allclose(attn.sum(axis=1), 1.0, atol=1e-9)

    def test_single_channel_collapse(self, rng):
        # C = 1: the softmax collapses to [[1]] so out = proj_out(V) + f
        f = rng.normal(0, 1, (4, 4, 1))
        w = CtmbWeights.random(1, seed=2)
        from darksplat.losses import _depthwise3x3
        v = _depthwise3x3(f @ w.proj_v.T, w.depth_v)
        expected = v @ w.proj_out.T + f
        assert np.array_equal(ctmb_forward(f, w), expected)

    def test_identity_weights_reduce_to_input(self, rng):
        f = rng.normal(0, 1, (5, 4, 3))
        w = CtmbWeights.identity(3)
        assert np.allclose(ctmb_forward(f, w), f)

    def test_channel_mismatch(self, rng):
        with pytest.raises(InvalidParameterError):
            ctmb_forward(rng.normal(0, 1, (4, 4, 3)), CtmbWeights.random(5))

    def test_temperature_positive(self):
        w = CtmbWeights.identity(2)
        with pytest.raises(InvalidParameterError):
            CtmbWeights(w.proj_q, w.proj_k, w.proj_v, w.depth_q, w.depth_k,
                        w.depth_v, w.proj_out, 0.0)


class TestProvider:
    def _frames(self, rng, n=4):
        return [rng.random((8, 8, 3)) for _ in range(n)]

    def test_oracle_bit_exact(self, rng):
        frames = self._frames(rng)
        prov = PseudoBrightProvider("oracle", bright_frames=frames)
        pair = prov.pair(1, 2, None, None, 0.1, 0.2)
        assert np.array_equal(pair.b1, frames[1])
        assert np.array_equal(pair.b2, frames[2])

    def test_degraded_limits_to_oracle(self, rng):
        frames = self._frames(rng)
        prov = PseudoBrightProvider("oracle-degraded", bright_frames=frames,
                                    blur_sigma=0.0, noise_sigma=0.0)
        pair = prov.pair(0, 3, None, None, 0.0, 0.3)
        assert np.allclose(pair.b1, np.clip(frames[0], 0, 1))
        assert np.allclose(pair.b2, np.clip(frames[3], 0, 1))

    def test_degraded_deterministic_per_seed(self, rng):
        frames = self._frames(rng)
        a = PseudoBrightProvider("oracle-degraded", bright_frames=frames, seed=5)
        b = PseudoBrightProvider("oracle-degraded", bright_frames=frames, seed=5)
        pa = a.pair(0, 1, None, None, 0.0, 0.1)
        # out-of-order access must not change the result
        b.pair(2, 3, None, None, 0.2, 0.3)
        pb = b.pair(0, 1, None, None, 0.0, 0.1)
        assert np.array_equal(pa.b1, pb.b1) and np.array_equal(pa.b2, pb.b2)

    def test_gain_mode(self):
        dark = np.full((4, 4, 3), 0.05)
        prov = PseudoBrightProvider("gain", gain=8.0)
        pair = prov.pair(0, 1, dark, dark, 0.0, 0.1)
        assert np.allclose(pair.b1, 0.4)

    def test_gain_clamps(self):
        dark = np.full((4, 4, 3), 0.2)
        prov = PseudoBrightProvider("gain", gain=8.0)
        pair = prov.pair(0, 1, dark, dark, 0.0, 0.1)
        assert np.allclose(pair.b1, 1.0)

    def test_oracle_requires_frames(self):
        with pytest.raises(ConfigurationError):
            PseudoBrightProvider("oracle")

    def test_unknown_mode(self):
        with pytest.raises(InvalidParameterError):
            PseudoBrightProvider("magic")
