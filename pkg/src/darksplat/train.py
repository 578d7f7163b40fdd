"""Training loop: random initialization, per-group Adam with the scheduled
position learning rate, triplet supervision against dark captures, and the
ablation harness.

Each iteration samples an adjacent view pair, renders both views, builds
the predicted event signal from the renders and the ground-truth signal
from the filtered event stream, obtains pseudo-bright frames from the
provider, and pushes the combined loss gradient through the rasterizer's
backward pass. Everything is seeded; two runs with the same configuration
produce identical metrics and scenes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidParameterError, TrainingDivergedError
from .events import (EventModelParams, accumulate, counts_to_log, luminance,
                     predicted_event_map, y_noise_filter)
from .losses import LossConfig, PseudoBrightProvider, loss_event, loss_hol, loss_mix
from .metrics import psnr, ssim
from .render import GradientSet, backward, render
from .scene import SH_C0, GaussianCloud, logit, quat_to_rotation

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

METRICS_HEADER = ("iteration", "loss_total", "loss_hol", "loss_event",
                  "loss_mix", "psnr", "n_gaussians")


@dataclass
class TrainConfig:
    """Everything the optimization loop needs, with paper-mirroring defaults."""

    iterations: int = 30_000
    init_points: int = 1000
    lr_position_start: float = 1.6e-4
    lr_position_end: float = 1.6e-6
    lr_features: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scaling: float = 5e-3
    lr_rotation: float = 1e-3
    loss_config: LossConfig = field(default_factory=LossConfig)
    event_params: EventModelParams = field(default_factory=EventModelParams)
    hol_weight: float = 1.0          # ablations drop the frame term via 0
    densify: bool = False
    densify_interval: int = 300
    densify_start: int = 500
    densify_end_frac: float = 0.7
    densify_grad_threshold: float = 2e-4
    densify_size_frac: float = 0.01  # split/clone boundary vs scene extent
    prune_opacity: float = 0.005
    seed: int = 0
    sh_degree: int = 1
    holdout_every: int = 0           # exclude every k-th view from training
    metrics_interval: int = 100
    checkpoint_interval: int = 0
    filter_window_us: int = 10_000
    filter_neighborhood: int = 3
    filter_min_support: int = 1
    background: tuple = (0.0, 0.0, 0.0)
    # position steps scale with the capture extent, as in the splatting
    # framework this training recipe inherits; None = radius of the camera
    # rig, computed by train()
    position_lr_scale: float | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidParameterError("iterations must be non-negative")
        for name in ("lr_position_start", "lr_position_end", "lr_features",
                     "lr_opacity", "lr_scaling", "lr_rotation"):
            if getattr(self, name) <= 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.lr_position_end > self.lr_position_start:
            raise InvalidParameterError("position lr must not grow over training")
        if self.sh_degree not in (0, 1, 2, 3):
            raise InvalidParameterError("sh_degree must be in 0..3")


_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


@dataclass
class TrainState:
    """Mutable optimizer state: the scene plus Adam moments and counters."""

    cloud: GaussianCloud
    moments: dict
    iteration: int = 0
    rng: np.random.Generator = None
    grad_accum: np.ndarray = None    # accumulated screen-gradient norms
    grad_count: np.ndarray = None

    @classmethod
    def fresh(cls, cloud, seed):
        n = len(cloud)
        moments = {name: {"m": np.zeros_like(getattr(cloud, name)),
                          "v": np.zeros_like(getattr(cloud, name))}
                   for name in _GROUPS}
        return cls(cloud, moments, 0, np.random.default_rng(seed),
                   np.zeros(n), np.zeros(n))


def init_random_cloud(n, bounds, seed, sh_degree=1) -> GaussianCloud:
    """Uniform random starting cloud inside an axis-aligned box.

    Rotations start at identity, scales at 5% of the box diagonal,
    opacities at 0.1; band-0 SH is sampled so the base color is uniform
    in [0, 1], higher bands start at zero.
    """
    if n <= 0:
        raise InvalidParameterError("need a positive number of points")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if np.any(hi <= lo):
        raise InvalidParameterError("bounds must be a non-degenerate box")
    rng = np.random.default_rng(seed)
    diag = float(np.linalg.norm(hi - lo))
    k = (sh_degree + 1) ** 2
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    sh = np.zeros((n, 3, k))
    sh[:, :, 0] = (rng.uniform(0.0, 1.0, (n, 3)) - 0.5) / SH_C0
    return GaussianCloud(
        positions=rng.uniform(lo, hi, (n, 3)),
        rotations=rot,
        log_scales=np.full((n, 3), np.log(0.05 * diag)),
        opacity_logits=np.full(n, logit(0.1)),
        sh_coeffs=sh)


def position_lr(iteration, total, start, end):
    """Log-linear decay: start * (end/start)^(iteration/total)."""
    if total <= 0:
        return start
    return start * (end / start) ** (iteration / total)


def adam_step(state: TrainState, grads: GradientSet, config: TrainConfig) -> TrainState:
    """One bias-corrected Adam update with per-group learning rates.

    Raises TrainingDivergedError (naming the group) on non-finite
    gradients. Rotations are re-normalized after the update.
    """
    scale = config.position_lr_scale if config.position_lr_scale else 1.0
    lrs = {
        "positions": scale * position_lr(state.iteration, config.iterations,
                                         config.lr_position_start,
                                         config.lr_position_end),
        "rotations": config.lr_rotation,
        "log_scales": config.lr_scaling,
        "opacity_logits": config.lr_opacity,
        "sh_coeffs": config.lr_features,
    }
    grad_arrays = {
        "positions": grads.positions, "rotations": grads.rotations,
        "log_scales": grads.log_scales, "opacity_logits": grads.opacity_logits,
        "sh_coeffs": grads.sh_coeffs,
    }
    t = state.iteration + 1
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name in _GROUPS:
        g = grad_arrays[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(
                f"non-finite gradient in parameter group {name!r}",
                iteration=state.iteration, group=name)
        mom = state.moments[name]
        mom["m"] = ADAM_BETA1 * mom["m"] + (1 - ADAM_BETA1) * g
        mom["v"] = ADAM_BETA2 * mom["v"] + (1 - ADAM_BETA2) * g * g
        update = lrs[name] * (mom["m"] / bc1) / (np.sqrt(mom["v"] / bc2) + ADAM_EPS)
        getattr(state.cloud, name)[...] -= update

    norms = np.linalg.norm(state.cloud.rotations, axis=1, keepdims=True)
    state.cloud.rotations /= norms
    state.iteration = t
    return state


def densify_and_prune(state: TrainState, config: TrainConfig, extent) -> TrainState:
    """Split/clone high-gradient Gaussians, prune near-transparent ones.

    Large Gaussians over the gradient threshold are replaced by two
    children offset +-0.5 sigma along the major axis with scales shrunk by
    1.6; small ones are cloned in place. Moments of surviving Gaussians
    carry over, new ones start fresh.
    """
    cloud = state.cloud
    n = len(cloud)
    avg = state.grad_accum / np.maximum(state.grad_count, 1.0)
    over = avg > config.densify_grad_threshold

    scales = cloud.scales()
    max_scale = scales.max(axis=1)
    big = max_scale > config.densify_size_frac * extent
    split = over & big
    clone = over & ~big
    keep = cloud.opacities() >= config.prune_opacity

    survivors = np.flatnonzero(keep & ~split)
    clones = np.flatnonzero(clone & keep)
    splits = np.flatnonzero(split & keep)

    parts = {name: [getattr(cloud, name)[survivors]] for name in _GROUPS}
    moments = {name: {k: [state.moments[name][k][survivors]] for k in ("m", "v")}
               for name in _GROUPS}

    def append(idx, positions=None, log_scales=None):
        for name in _GROUPS:
            arr = getattr(cloud, name)[idx]
            if name == "positions" and positions is not None:
                arr = positions
            if name == "log_scales" and log_scales is not None:
                arr = log_scales
            parts[name].append(arr)
            for k in ("m", "v"):
                moments[name][k].append(np.zeros_like(arr))

    if clones.size:
        append(clones)

    if splits.size:
        R = quat_to_rotation(cloud.rotations[splits])
        axis_idx = np.argmax(scales[splits], axis=1)
        axes = R[np.arange(splits.size), :, axis_idx]
        sigma = scales[splits][np.arange(splits.size), axis_idx]
        offset = 0.5 * sigma[:, None] * axes
        shrunk = cloud.log_scales[splits] - np.log(1.6)
        append(splits, positions=cloud.positions[splits] + offset,
               log_scales=shrunk)
        append(splits, positions=cloud.positions[splits] - offset,
               log_scales=shrunk)

    arrays = {name: np.concatenate(parts[name], axis=0) for name in _GROUPS}
    new_cloud = GaussianCloud(arrays["positions"], arrays["rotations"],
                              arrays["log_scales"], arrays["opacity_logits"],
                              arrays["sh_coeffs"])
    if len(new_cloud) == 0:
        warnings.warn("densify/prune removed every Gaussian; training is "
                      "degenerate", RuntimeWarning)
    state.cloud = new_cloud
    state.moments = {
        name: {k: np.concatenate(moments[name][k], axis=0) for k in ("m", "v")}
        for name in _GROUPS}
    state.grad_accum = np.zeros(len(new_cloud))
    state.grad_count = np.zeros(len(new_cloud))
    return state


def _event_image_grad(image, upstream, params):
    """Chain an event-map gradient back to the rendered image.

    upstream is d loss / d L(I) on the luminance plane; the log map slope
    g u^(g-1) / (u^g + kappa) and the luminance weights distribute it over
    channels.
    """
    u = luminance(image)
    ug = np.power(u, params.g)
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(u > 0, params.g * np.power(u, params.g - 1.0)
                         / (ug + params.kappa), 0.0)
    from .events import LUMA_WEIGHTS
    return (upstream * slope)[:, :, None] * LUMA_WEIGHTS[None, None, :]


def pair_objective(cloud, cam1, cam2, bright1, bright2, e_gt, loss_cfg,
                   event_params, hol_weight=1.0, background=(0, 0, 0),
                   with_grads=True):
    """The per-iteration objective on one adjacent view pair.

    Renders both views and assembles hol + lambda1 * event + lambda2 * mix
    (the hol part averages the two frames of the pair). Returns
    (total, hol, event, mix, grads) with ``grads`` the parameter gradients
    summed over both renders, or None when ``with_grads`` is false.
    """
    background = np.asarray(background, dtype=np.float64)
    i1, graph1 = render(cloud, cam1, background)
    i2, graph2 = render(cloud, cam2, background)

    d1 = np.zeros_like(i1)
    d2 = np.zeros_like(i2)
    hol_val = 0.0
    if hol_weight > 0:
        h1, gh1 = loss_hol(i1, bright1)
        h2, gh2 = loss_hol(i2, bright2)
        hol_val = 0.5 * (h1 + h2)
        d1 += hol_weight * 0.5 * gh1
        d2 += hol_weight * 0.5 * gh2

    ev_val = mix_val = 0.0
    if loss_cfg.lambda1 > 0:
        e_pred = predicted_event_map(i1, i2, event_params)
        ev_val, de = loss_event(e_pred, e_gt)
        d2 += loss_cfg.lambda1 * _event_image_grad(i2, de, event_params)
        d1 -= loss_cfg.lambda1 * _event_image_grad(i1, de, event_params)
    if loss_cfg.lambda2 > 0:
        mix_val, gm1, gm2 = loss_mix(i1, i2, bright1, bright2, event_params)
        d1 += loss_cfg.lambda2 * gm1
        d2 += loss_cfg.lambda2 * gm2

    total = hol_weight * hol_val + loss_cfg.lambda1 * ev_val \
        + loss_cfg.lambda2 * mix_val
    grads = None
    if with_grads:
        grads = backward(graph1, d1, cloud, cam1)
        grads.add(backward(graph2, d2, cloud, cam2))
    return total, hol_val, ev_val, mix_val, grads


def training_views(n_views, holdout_every):
    """(train indices, held-out indices) under the every-k holdout rule."""
    if holdout_every and holdout_every > 0:
        held = [i for i in range(n_views) if i % holdout_every == 0]
        kept = [i for i in range(n_views) if i % holdout_every != 0]
    else:
        held, kept = [], list(range(n_views))
    return kept, held


def evaluate_scene(cloud, dataset, view_indices, background=(0, 0, 0)):
    """Mean PSNR/SSIM of renders against the dataset's bright frames."""
    if dataset.bright_frames is None or not view_indices:
        return float("nan"), float("nan")
    ps, ss = [], []
    for i in view_indices:
        img, _ = render(cloud, dataset.cameras[i], np.asarray(background))
        ps.append(psnr(img, dataset.bright_frames[i]))
        ss.append(ssim(img, dataset.bright_frames[i]))
    return float(np.mean(ps)), float(np.mean(ss))


def train(dataset, config: TrainConfig, provider: PseudoBrightProvider,
          checkpoint_fn=None):
    """Optimize a fresh random cloud against a dataset.

    Returns (cloud, metrics) where metrics is a list of dicts with the
    METRICS_HEADER keys, one every ``metrics_interval`` iterations plus
    the final iteration. ``checkpoint_fn(iteration, cloud)`` is invoked at
    the configured checkpoint interval when given.
    """
    if len(dataset) < 2:
        raise InvalidParameterError("dataset needs at least two views")
    if config.position_lr_scale is None:
        centers = np.stack([cam.center() for cam in dataset.cameras])
        radius = float(np.linalg.norm(centers - centers.mean(axis=0),
                                      axis=1).max())
        config = replace(config, position_lr_scale=max(radius, 1e-6))
    cloud = init_random_cloud(config.init_points, dataset.bounds, config.seed,
                              config.sh_degree)
    state = TrainState.fresh(cloud, config.seed)
    background = np.asarray(config.background, dtype=np.float64)
    eps = config.event_params.epsilon

    filtered = y_noise_filter(dataset.events, config.filter_window_us,
                              config.filter_neighborhood,
                              config.filter_min_support)

    kept, held = training_views(len(dataset), config.holdout_every)
    if len(kept) < 2:
        raise InvalidParameterError("holdout leaves fewer than two views")
    pairs = [(kept[i], kept[i + 1]) for i in range(len(kept) - 1)]
    eval_views = held   # metrics PSNR is against held-out views only

    times = dataset.timestamps
    e_gt_cache = [counts_to_log(accumulate(filtered, times[a], times[b]), eps)
                  for a, b in pairs]

    densify_end = int(config.densify_end_frac * config.iterations)
    metrics = []

    def record(iteration, total, hol, ev, mix):
        p, _s = evaluate_scene(state.cloud, dataset, eval_views, background)
        metrics.append({
            "iteration": iteration, "loss_total": total, "loss_hol": hol,
            "loss_event": ev, "loss_mix": mix, "psnr": p,
            "n_gaussians": len(state.cloud)})

    for it in range(1, config.iterations + 1):
        pair_idx = int(state.rng.integers(len(pairs)))
        a, b = pairs[pair_idx]
        cam1, cam2 = dataset.cameras[a], dataset.cameras[b]
        bright = provider.pair(a, b, dataset.dark_frames[a],
                               dataset.dark_frames[b], cam1.timestamp,
                               cam2.timestamp, e_gt_cache[pair_idx])

        total, hol_val, ev_val, mix_val, grads = pair_objective(
            state.cloud, cam1, cam2, bright.b1, bright.b2,
            e_gt_cache[pair_idx], config.loss_config, config.event_params,
            config.hol_weight, background)
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it}", iteration=it)

        if config.densify:
            norms = np.linalg.norm(grads.screen_means, axis=1)
            state.grad_accum += norms
            state.grad_count += norms > 0

        adam_step(state, grads, config)

        if (config.densify and config.densify_start <= it <= densify_end
                and it % config.densify_interval == 0):
            extent = float(np.linalg.norm(dataset.bounds[1] - dataset.bounds[0]))
            densify_and_prune(state, config, extent)
            if len(state.cloud) == 0:
                break

        if checkpoint_fn and config.checkpoint_interval > 0 \
                and it % config.checkpoint_interval == 0:
            checkpoint_fn(it, state.cloud)

        if it % config.metrics_interval == 0 or it == config.iterations:
            record(it, total, hol_val, ev_val, mix_val)

    if config.iterations == 0:
        record(0, float("nan"), float("nan"), float("nan"), float("nan"))
    return state.cloud, metrics


def metrics_to_csv(metrics, path):
    """Write the metrics log in the documented CSV layout (LF endings)."""
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for row in metrics:
            fh.write(",".join(str(row[k]) for k in METRICS_HEADER) + "\n")


ABLATION_ROWS = (
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)


def ablate(dataset, base_config: TrainConfig, provider: PseudoBrightProvider):
    """Train the seven non-empty loss subsets and report PSNR/SSIM each.

    Rows follow the component table order: hol, event, mix, hol+event,
    hol+mix, event+mix, all three. Disabled terms are dropped (hol) or
    zero-weighted (event/mix).
    """
    results = []
    for use_hol, use_event, use_mix in ABLATION_ROWS:
        cfg = replace(
            base_config,
            hol_weight=1.0 if use_hol else 0.0,
            loss_config=LossConfig(
                base_config.loss_config.lambda1 if use_event else 0.0,
                base_config.loss_config.lambda2 if use_mix else 0.0))
        cloud, _ = train(dataset, cfg, provider)
        _kept, held = training_views(len(dataset), cfg.holdout_every)
        eval_views = held if held else list(range(len(dataset)))
        p, s = evaluate_scene(cloud, dataset, eval_views, cfg.background)
        results.append({"hol": use_hol, "event": use_event, "mix": use_mix,
                        "psnr": p, "ssim": s})
    return results


def ablation_to_csv(rows, path):
    with open(path, "w", newline="\n") as fh:
        fh.write("hol,event,mix,psnr,ssim\n")
        for row in rows:
            fh.write(f"{int(row['hol'])},{int(row['event'])},{int(row['mix'])},"
                     f"{row['psnr']},{row['ssim']}\n")
