"""Command-line surface for the pipeline.

Subcommands: synth, train, render, eval, filter, simulate, ablate.
stdout carries machine-parseable summaries only; diagnostics go to stderr.
Exit codes: 0 success, 2 usage, 3 IO/parse failure, 4 numeric divergence.

Every subcommand accepts ``--config FILE`` pointing at a flat key=value
text file; explicit flags win over the file, the file wins over defaults.
The environment variable DARKSPLAT_THREADS caps worker threads used for
batch rendering (0 or unset = auto).
"""

from __future__ import annotations

import functools
import hashlib
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from .data import (generate_turntable, load_dataset, load_poses, load_scene,
                   save_dataset, save_scene)
from .errors import (DarksplatError, ParseError, TrainingDivergedError)
from .events import (EventModelParams, load_events, save_events,
                     simulate_events, y_noise_filter, EventStream)
from .losses import LossConfig, PROVIDER_MODES, PseudoBrightProvider
from .metrics import psnr, ssim
from .png16 import from_uint16, read_png16, to_uint16, write_png16
from .render import render
from .train import (TrainConfig, ablate, ablation_to_csv, metrics_to_csv, train)


def worker_threads():
    """Thread cap from DARKSPLAT_THREADS (0 or unset means auto)."""
    raw = os.environ.get("DARKSPLAT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = min(4, os.cpu_count() or 1)
    return max(1, n)


def _config_overlay(ctx, config_path):
    """Fill non-flag parameters from a key=value file."""
    if not config_path:
        return
    try:
        lines = Path(config_path).read_text().splitlines()
    except OSError as exc:
        raise click.UsageError(f"cannot read config file: {exc}")
    values = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise click.UsageError(
                f"{config_path}:{lineno}: expected key=value")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    for param in ctx.command.params:
        name = param.name
        if name in values and ctx.get_parameter_source(name).name == "DEFAULT":
            ctx.params[name] = param.type.convert(values[name], param, ctx)


def _with_config(fn):
    """Adds --config and runs the overlay before the command body."""
    @click.option("--config", "config_path", type=click.Path(), default=None,
                  help="key=value overlay file (flags take precedence)")
    @click.pass_context
    @functools.wraps(fn)
    def wrapper(ctx, config_path, **kwargs):
        _config_overlay(ctx, config_path)
        kwargs.update({k: v for k, v in ctx.params.items()
                       if k not in ("config_path",)})
        return fn(**kwargs)
    return wrapper


def _guarded(fn):
    """Map library errors onto the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TrainingDivergedError as exc:
            click.echo(f"error: {exc} (iteration {exc.iteration})", err=True)
            sys.exit(4)
        except (ParseError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)
        except DarksplatError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
    return wrapper


@click.group()
def main():
    """Event-assisted Gaussian splatting for low-light reconstruction."""


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--views", default=60, show_default=True)
@click.option("--gaussians", default=20, show_default=True)
@click.option("--dark-gain", default=0.1, show_default=True)
@click.option("--noise-rate", default=1.0, show_default=True,
              help="background-activity events per pixel per second")
@click.option("--size", default=48, show_default=True, help="image side length")
@click.option("--radius", default=4.0, show_default=True)
@click.option("--dt", default=0.1, show_default=True,
              help="seconds between consecutive views")
@click.option("--seed", default=0, show_default=True)
@_with_config
@_guarded
def synth(out_dir, views, gaussians, dark_gain, noise_rate, size, radius, dt,
          seed):
    """Generate a synthetic turntable dataset plus its ground-truth scene."""
    if views < 8:
        raise click.UsageError("--views must be at least 8")
    gt, dataset = generate_turntable(
        n_gaussians=gaussians, radius=radius, views=views, image_size=size,
        dark_gain=dark_gain, noise_rate=noise_rate, dt=dt, seed=seed)
    save_dataset(dataset, out_dir)
    digest = _hash_args(views=views, gaussians=gaussians, dark_gain=dark_gain,
                        noise_rate=noise_rate, size=size, radius=radius,
                        dt=dt, seed=seed)
    save_scene(gt, Path(out_dir) / "scene_gt.gs", config_hash=digest)
    click.echo(f"views={views} events={len(dataset.events)} "
               f"gaussians={gaussians} out={out_dir}")


def _hash_args(**kwargs):
    text = ",".join(f"{k}={kwargs[k]!r}" for k in sorted(kwargs))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


@main.command(name="train")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--iters", default=30_000, show_default=True)
@click.option("--lambda1", default=0.25, show_default=True)
@click.option("--lambda2", default=0.25, show_default=True)
@click.option("--provider", default="oracle-degraded", show_default=True,
              type=click.Choice(PROVIDER_MODES))
@click.option("--densify", default="off", show_default=True,
              type=click.Choice(["on", "off"]))
@click.option("--seed", default=0, show_default=True)
@click.option("--holdout-every", default=0, show_default=True,
              help="exclude every k-th view from training (0 = none)")
@click.option("--init-points", default=1000, show_default=True)
@click.option("--sh-degree", default=1, show_default=True)
@click.option("--blur-sigma", default=1.5, show_default=True)
@click.option("--noise-sigma", default=0.01, show_default=True)
@click.option("--gain", default=8.0, show_default=True)
@click.option("--metrics", "metrics_path", type=click.Path(), default=None,
              help="metrics CSV path (default: <out>.metrics.csv)")
@click.option("--checkpoint-every", default=0, show_default=True)
@click.option("--figure/--no-figure", default=True, show_default=True,
              help="write a training-curves PNG next to the metrics CSV")
@_with_config
@_guarded
def train_cmd(data_dir, out_path, iters, lambda1, lambda2, provider, densify,
              seed, holdout_every, init_points, sh_degree, blur_sigma,
              noise_sigma, gain, metrics_path, checkpoint_every, figure):
    """Train a scene against a dataset; writes the scene and a metrics CSV."""
    dataset = load_dataset(data_dir)
    cfg = TrainConfig(
        iterations=iters, init_points=init_points,
        loss_config=LossConfig(lambda1, lambda2), densify=densify == "on",
        seed=seed, sh_degree=sh_degree, holdout_every=holdout_every,
        checkpoint_interval=checkpoint_every)
    prov = PseudoBrightProvider(provider, bright_frames=dataset.bright_frames,
                                blur_sigma=blur_sigma, noise_sigma=noise_sigma,
                                gain=gain, seed=seed)
    digest = _hash_args(iters=iters, lambda1=lambda1, lambda2=lambda2,
                        provider=provider, densify=densify, seed=seed,
                        holdout_every=holdout_every, init_points=init_points,
                        sh_degree=sh_degree)

    out_path = Path(out_path)

    def checkpoint(iteration, cloud):
        save_scene(cloud, out_path.with_suffix(f".ckpt_{iteration}.gs"),
                   config_hash=digest)

    cloud, metrics = train(dataset, cfg, prov,
                           checkpoint_fn=checkpoint if checkpoint_every else None)
    save_scene(cloud, out_path, config_hash=digest)
    metrics_path = Path(metrics_path) if metrics_path \
        else out_path.with_suffix(out_path.suffix + ".metrics.csv")
    metrics_to_csv(metrics, metrics_path)
    if figure and metrics:
        from .figures import training_curves
        training_curves(metrics, metrics_path.with_suffix(".png"))
    final_psnr = metrics[-1]["psnr"] if metrics else float("nan")
    click.echo(f"iterations={iters} gaussians={len(cloud)} "
               f"psnr={_fmt(final_psnr)} scene={out_path}")


def _fmt(v):
    return str(round(float(v), 6))


@main.command(name="render")
@click.option("--scene", "scene_path", required=True, type=click.Path())
@click.option("--poses", "poses_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--view", "views", multiple=True, type=int,
              help="view index to render (repeatable; default: all)")
@_with_config
@_guarded
def render_cmd(scene_path, poses_path, out_dir, views):
    """Render stored poses from a scene file into 16-bit PNGs."""
    cloud, _ = load_scene(scene_path)
    cams, _bounds = load_poses(poses_path)
    indices = list(views) if views else list(range(len(cams)))
    for i in indices:
        if i < 0 or i >= len(cams):
            raise click.UsageError(
                f"view {i} out of range (dataset has {len(cams)} views)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def render_one(i):
        img, _ = render(cloud, cams[i])
        write_png16(out / f"{i:04d}.png", to_uint16(img))

    n_workers = min(worker_threads(), max(1, len(indices)))
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(render_one, indices))
    else:
        for i in indices:
            render_one(i)
    click.echo(f"rendered={len(indices)} out={out_dir}")


@main.command(name="eval")
@click.option("--renders", "renders_dir", required=True, type=click.Path())
@click.option("--reference", "reference_dir", required=True, type=click.Path())
@_with_config
@_guarded
def eval_cmd(renders_dir, reference_dir):
    """Mean PSNR/SSIM of every render against its same-named reference."""
    renders = sorted(Path(renders_dir).glob("*.png"))
    if not renders:
        raise click.UsageError(f"no PNG renders in {renders_dir}")
    ps, ss = [], []
    for rp in renders:
        ref = Path(reference_dir) / rp.name
        if not ref.exists():
            raise ParseError(f"missing reference for {rp.name}", path=str(ref))
        a = from_uint16(read_png16(rp))
        b = from_uint16(read_png16(ref))
        ps.append(psnr(a, b))
        ss.append(ssim(a, b))
    click.echo(f"psnr={_fmt(np.mean(ps))} ssim={_fmt(np.mean(ss))}")


@main.command(name="filter")
@click.option("--in", "in_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--window-us", default=10_000, show_default=True)
@click.option("--neighborhood", default=3, show_default=True)
@click.option("--min-support", default=1, show_default=True)
@_with_config
@_guarded
def filter_cmd(in_path, out_path, window_us, neighborhood, min_support):
    """Run the density noise filter over an event file."""
    if window_us <= 0:
        raise click.UsageError("--window-us must be positive")
    if neighborhood < 3 or neighborhood % 2 == 0:
        raise click.UsageError("--neighborhood must be odd and >= 3")
    stream = load_events(in_path)
    kept = y_noise_filter(stream, window_us, neighborhood, min_support)
    save_events(kept, out_path)
    click.echo(f"in={len(stream)} kept={len(kept)} out={out_path}")


@main.command(name="simulate")
@click.option("--frames", "frames_dir", required=True, type=click.Path(),
              help="directory of PNG frames in filename order")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--epsilon", default=0.2, show_default=True)
@click.option("--dt", default=0.1, show_default=True,
              help="seconds between consecutive frames")
@_with_config
@_guarded
def simulate_cmd(frames_dir, out_path, epsilon, dt):
    """Simulate an event stream from a directory of frames."""
    frames = sorted(Path(frames_dir).glob("*.png"))
    if len(frames) < 2:
        raise click.UsageError("need at least two PNG frames")
    params = EventModelParams(epsilon=epsilon)
    images = [from_uint16(read_png16(p)) for p in frames]
    h, w = images[0].shape[:2]
    pieces = [simulate_events(images[i], images[i + 1], i * dt, (i + 1) * dt,
                              params) for i in range(len(images) - 1)]
    stream = EventStream(
        w, h,
        np.concatenate([s.t for s in pieces]),
        np.concatenate([s.x for s in pieces]),
        np.concatenate([s.y for s in pieces]),
        np.concatenate([s.polarity for s in pieces]))
    save_events(stream, out_path)
    click.echo(f"frames={len(frames)} events={len(stream)} out={out_path}")


@main.command(name="ablate")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--iters", default=1000, show_default=True)
@click.option("--lambda1", default=0.25, show_default=True)
@click.option("--lambda2", default=0.25, show_default=True)
@click.option("--provider", default="oracle-degraded", show_default=True,
              type=click.Choice(PROVIDER_MODES))
@click.option("--seed", default=0, show_default=True)
@click.option("--holdout-every", default=6, show_default=True)
@click.option("--figure/--no-figure", default=True, show_default=True)
@_with_config
@_guarded
def ablate_cmd(data_dir, out_path, iters, lambda1, lambda2, provider, seed,
               holdout_every, figure):
    """Train all seven loss subsets and tabulate PSNR/SSIM."""
    dataset = load_dataset(data_dir)
    cfg = TrainConfig(iterations=iters, loss_config=LossConfig(lambda1, lambda2),
                      seed=seed, holdout_every=holdout_every)
    prov = PseudoBrightProvider(provider, bright_frames=dataset.bright_frames,
                                seed=seed)
    rows = ablate(dataset, cfg, prov)
    ablation_to_csv(rows, out_path)
    if figure:
        from .figures import ablation_chart
        ablation_chart(rows, Path(out_path).with_suffix(".png"))
    for row in rows:
        label = "+".join(n for n, on in (("hol", row["hol"]),
                                         ("event", row["event"]),
                                         ("mix", row["mix"])) if on)
        click.echo(f"{label} psnr={_fmt(row['psnr'])} ssim={_fmt(row['ssim'])}")


if __name__ == "__main__":
    main()
