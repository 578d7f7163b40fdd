"""Triplet supervision losses, the color-tone attention block, and the
pseudo-bright frame providers.

The three losses are combined as hol + lambda1 * event + lambda2 * mix,
both weights defaulting to 0.25. Every loss returns its scalar value
together with the analytic gradient w.r.t. the rendered inputs so the
training loop can push them through the rasterizer backward pass.

The pretrained tone-mapping network that produces pseudo-bright frames in
the full system is out of scope here; a pluggable provider stands in for
it (ground truth, ground truth with configurable degradation, or a plain
gain fallback that needs no reference frames).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, InvalidParameterError
from .events import LUMA_WEIGHTS, EventMap, EventModelParams, luminance


@dataclass
class LossConfig:
    """Weights of the event and mix terms in the total loss."""

    lambda1: float = 0.25
    lambda2: float = 0.25

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidParameterError("loss weights must be non-negative")


def loss_hol(render, bright):
    """Frame-level MSE over all pixel-channels.

    Returns (value, d value / d render).
    """
    render = np.asarray(render, dtype=np.float64)
    bright = np.asarray(bright, dtype=np.float64)
    if render.shape != bright.shape:
        raise InvalidParameterError("image dimensions differ")
    n = render.size
    diff = render - bright
    return float(np.mean(diff * diff)), 2.0 * diff / n


def loss_event(e_pred: EventMap, e_gt: EventMap, n_views=1):
    """Event supervision: mean squared log-difference mismatch.

    Both maps must be in log-intensity units. The per-pair value is
    divided by ``n_views`` so a caller accumulating over a batch of view
    pairs ends up with the batch mean. Returns (value, d value / d e_pred).
    """
    if e_pred.units != "log" or e_gt.units != "log":
        raise InvalidParameterError("event loss expects log-intensity maps")
    if e_pred.shape != e_gt.shape:
        raise InvalidParameterError("event map dimensions differ")
    if n_views < 1:
        raise InvalidParameterError("n_views must be at least 1")
    diff = e_pred.values - e_gt.values
    n = diff.size * n_views
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def _log_abs_diff(a, b, g, kappa):
    """L(|a - b|) on luminance planes, plus pieces for the chain rule."""
    d = luminance(a) - luminance(b)
    u = np.abs(d)
    ug = np.power(u, g)
    val = np.log(ug + kappa)
    # dL/dd = g u^(g-1) sign(d) / (u^g + kappa); zero at d == 0 (subgradient)
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(u > 0, g * np.power(u, g - 1.0) / (ug + kappa), 0.0)
    return val, slope * np.sign(d)


def loss_mix(r1, r2, b1, b2, params: EventModelParams):
    """Mixed-modality sharpening loss.

    Mean over pixels of (L(|r1 - r2|) - L(|b1 - b2|))^2, with L the event
    log mapping applied to absolute luminance differences. Returns
    (value, d/d r1, d/d r2).
    """
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    b1 = np.asarray(b1, dtype=np.float64)
    b2 = np.asarray(b2, dtype=np.float64)
    if not (r1.shape == r2.shape == b1.shape == b2.shape):
        raise InvalidParameterError("image dimensions differ")
    lr, dlr = _log_abs_diff(r1, r2, params.g, params.kappa)
    lb, _ = _log_abs_diff(b1, b2, params.g, params.kappa)
    diff = lr - lb
    n = diff.size
    value = float(np.mean(diff * diff))
    upstream = (2.0 * diff / n) * dlr           # d value / d lum-difference
    grad_r1 = upstream[:, :, None] * LUMA_WEIGHTS[None, None, :]
    return value, grad_r1, -grad_r1


def total_loss(hol, event, mix, cfg: LossConfig):
    """Weighted sum hol + lambda1 * event + lambda2 * mix."""
    return float(hol) + cfg.lambda1 * float(event) + cfg.lambda2 * float(mix)


# ---------------------------------------------------------------------------
# color tone matching block (channel-wise self-attention)
# ---------------------------------------------------------------------------

@dataclass
class CtmbWeights:
    """Parameters of the channel-attention block.

    proj_q/k/v: (C, C) 1x1 projections; depth_q/k/v: (C, 3, 3) depthwise
    kernels; proj_out: (C, C); temperature > 0 scales the attention logits.
    """

    proj_q: np.ndarray
    proj_k: np.ndarray
    proj_v: np.ndarray
    depth_q: np.ndarray
    depth_k: np.ndarray
    depth_v: np.ndarray
    proj_out: np.ndarray
    temperature: float

    def __post_init__(self):
        c = self.proj_q.shape[0]
        shapes = {
            "proj_q": (c, c), "proj_k": (c, c), "proj_v": (c, c),
            "proj_out": (c, c), "depth_q": (c, 3, 3), "depth_k": (c, 3, 3),
            "depth_v": (c, 3, 3),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise InvalidParameterError(f"{name} must have shape {shape}")
            setattr(self, name, arr)
        if not self.temperature > 0:
            raise InvalidParameterError("temperature must be positive")

    @property
    def channels(self):
        return self.proj_q.shape[0]

    @classmethod
    def identity(cls, channels):
        """Projections = identity, depthwise = centered delta, output = 0."""
        eye = np.eye(channels)
        delta = np.zeros((channels, 3, 3))
        delta[:, 1, 1] = 1.0
        return cls(eye.copy(), eye.copy(), eye.copy(), delta.copy(),
                   delta.copy(), delta.copy(), np.zeros((channels, channels)),
                   float(np.sqrt(channels)))

    @classmethod
    def random(cls, channels, seed=0, scale=0.1):
        rng = np.random.default_rng(seed)
        shp = (channels, channels)
        return cls(rng.normal(0, scale, shp), rng.normal(0, scale, shp),
                   rng.normal(0, scale, shp), rng.normal(0, scale, (channels, 3, 3)),
                   rng.normal(0, scale, (channels, 3, 3)),
                   rng.normal(0, scale, (channels, 3, 3)),
                   rng.normal(0, scale, shp), float(np.sqrt(channels)))


def _depthwise3x3(x, kernels):
    """Per-channel 3x3 correlation with reflect padding; x is (H, W, C)."""
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="reflect")
    H, W = x.shape[:2]
    out = np.zeros_like(x)
    for u in range(3):
        for v in range(3):
            out += xp[u:u + H, v:v + W, :] * kernels[None, None, :, u, v]
    return out


def _row_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def ctmb_forward(f, w: CtmbWeights):
    """Channel-wise self-attention with a residual connection.

    f: (H, W, C). Q, K, V are 1x1-projected then depthwise-filtered maps
    reshaped to (C, H*W); the attention map softmax(Q K^T / temperature)
    is C x C; the output is the attended V, 1x1-projected, plus f.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3:
        raise InvalidParameterError("feature map must be (H, W, C)")
    H, W, C = f.shape
    if C != w.channels:
        raise InvalidParameterError(
            f"feature channels {C} do not match weights ({w.channels})")

    q = _depthwise3x3(f @ w.proj_q.T, w.depth_q)
    k = _depthwise3x3(f @ w.proj_k.T, w.depth_k)
    v = _depthwise3x3(f @ w.proj_v.T, w.depth_v)

    qm = q.reshape(H * W, C).T
    km = k.reshape(H * W, C).T
    vm = v.reshape(H * W, C).T
    attn = _row_softmax(qm @ km.T / w.temperature)
    out = (attn @ vm).T.reshape(H, W, C)
    return out @ w.proj_out.T + f


def ctmb_attention(f, w: CtmbWeights):
    """The C x C attention map alone (rows sum to one)."""
    f = np.asarray(f, dtype=np.float64)
    H, W, C = f.shape
    q = _depthwise3x3(f @ w.proj_q.T, w.depth_q).reshape(H * W, C).T
    k = _depthwise3x3(f @ w.proj_k.T, w.depth_k).reshape(H * W, C).T
    return _row_softmax(q @ k.T / w.temperature)


# ---------------------------------------------------------------------------
# pseudo-bright frame providers
# ---------------------------------------------------------------------------

@dataclass
class PseudoBrightPair:
    """Estimated bright frames for the two ends of a supervision window."""

    b1: np.ndarray
    b2: np.ndarray
    t1: float
    t2: float

    def __post_init__(self):
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if self.b1.shape != self.b2.shape:
            raise InvalidParameterError("pseudo-bright frames differ in shape")
        if not self.t2 > self.t1:
            raise InvalidParameterError("pair timestamps must be increasing")


PROVIDER_MODES = ("oracle", "oracle-degraded", "gain")


class PseudoBrightProvider:
    """Stand-in for the pretrained tone-mapping network.

    oracle          -- hands back configured reference frames bit-exactly.
    oracle-degraded -- reference frames with Gaussian blur and an additive
                       noise field, emulating an imperfect estimator.
    gain            -- dark frames scaled by a fixed gain and clamped; a
                       no-learning fallback needing no references.

    The degradation noise field is drawn once per seed and shared across
    views: an estimator's tone error is a systematic bias, and the
    sharpening loss relies on consecutive estimates having correlated
    error that subtraction cancels. Calls are deterministic per seed,
    regardless of order.
    """

    def __init__(self, mode, bright_frames=None, blur_sigma=1.5,
                 noise_sigma=0.01, gain=8.0, seed=0):
        if mode not in PROVIDER_MODES:
            raise InvalidParameterError(f"unknown provider mode {mode!r}")
        if mode in ("oracle", "oracle-degraded") and bright_frames is None:
            raise ConfigurationError(
                f"{mode} provider needs configured bright frames")
        self.mode = mode
        self.bright_frames = bright_frames
        self.blur_sigma = float(blur_sigma)
        self.noise_sigma = float(noise_sigma)
        self.gain = float(gain)
        self.seed = int(seed)
        self._cache = {}
        self._noise_field = None

    def _degraded(self, view):
        cached = self._cache.get(view)
        if cached is not None:
            return cached
        img = np.asarray(self.bright_frames[view], dtype=np.float64)
        if self.blur_sigma > 0:
            img = ndimage.gaussian_filter(
                img, sigma=(self.blur_sigma, self.blur_sigma, 0.0))
        if self.noise_sigma > 0:
            if self._noise_field is None:
                rng = np.random.default_rng(self.seed)
                self._noise_field = rng.normal(0.0, self.noise_sigma, img.shape)
            img = img + self._noise_field
        img = np.clip(img, 0.0, 1.0)
        self._cache[view] = img
        return img

    def pair(self, i1, i2, dark1, dark2, t1, t2, e_gt=None) -> PseudoBrightPair:
        """Pseudo-bright frames for views i1 < i2 at times t1 < t2.

        ``e_gt`` (the accumulated ground-truth events of the window) is
        accepted for interface parity but unused by these stand-ins.
        """
        if self.mode == "oracle":
            return PseudoBrightPair(
                np.asarray(self.bright_frames[i1], dtype=np.float64),
                np.asarray(self.bright_frames[i2], dtype=np.float64), t1, t2)
        if self.mode == "oracle-degraded":
            return PseudoBrightPair(self._degraded(i1), self._degraded(i2),
                                    t1, t2)
        return PseudoBrightPair(
            np.clip(np.asarray(dark1, dtype=np.float64) * self.gain, 0.0, 1.0),
            np.clip(np.asarray(dark2, dtype=np.float64) * self.gain, 0.0, 1.0),
            t1, t2)
