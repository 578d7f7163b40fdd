"""Dataset container, scene/dataset serialization, and the synthetic
turntable generator used for end-to-end experiments.

On disk a dataset is a directory:

    poses.json    intrinsics, per-view pose + timestamp, scene bounds
    dark/####.png 16-bit linear dark frames, one per view
    bright/####.png  optional ground-truth bright frames
    events.evs    binary event stream (events.csv accepted as fallback)

Scenes serialize to a small binary container that round-trips the float64
parameter arrays bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CorruptFileError, InvalidParameterError, ParseError,
                     UnsupportedVersionError)
from .events import (EventModelParams, EventStream, inject_dark_noise,
                     load_events, save_events, seconds_to_us, simulate_events)
from .png16 import from_uint16, read_png16, to_uint16, write_png16
from .render import render
from .scene import SH_C0, Camera, GaussianCloud, logit

_SCENE_MAGIC = b"DSGS"
_SCENE_VERSION = 1
DEFAULT_BOUNDS = (np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))


@dataclass
class Dataset:
    """Everything the trainer consumes for one captured scene."""

    cameras: list
    dark_frames: list
    events: EventStream
    bright_frames: list | None = None
    bounds: tuple = field(default_factory=lambda: DEFAULT_BOUNDS)

    def __post_init__(self):
        if len(self.cameras) != len(self.dark_frames):
            raise InvalidParameterError("one dark frame per camera is required")
        times = np.array([c.timestamp for c in self.cameras])
        if times.size and np.any(np.diff(times) <= 0):
            raise InvalidParameterError("camera timestamps must strictly increase")
        if self.bright_frames is not None and len(self.bright_frames) != len(self.cameras):
            raise InvalidParameterError("one bright frame per camera is required")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise InvalidParameterError("bounds must be a non-degenerate box")
        self.bounds = (lo, hi)
        if len(self.events) and times.size:
            t0, t1 = seconds_to_us(times[0]), seconds_to_us(times[-1])
            if self.events.t[0] < t0 or self.events.t[-1] > t1:
                raise InvalidParameterError(
                    "event stream extends outside the camera time span")

    def __len__(self):
        return len(self.cameras)

    @property
    def timestamps(self):
        return np.array([c.timestamp for c in self.cameras])


# ---------------------------------------------------------------------------
# synthetic turntable generator
# ---------------------------------------------------------------------------

def generate_turntable(n_gaussians=20, radius=4.5, views=60, image_size=64,
                       dark_gain=0.1, noise_rate=1.0, sensor_noise=0.005,
                       dt=0.1, seed=0, params=None, bounds=None, sh_degree=1):
    """Random smooth scene on a circular camera path, plus its capture.

    Returns (ground-truth cloud, Dataset). Cameras sit on a circle of
    ``radius`` looking at the origin, evenly spaced in angle and time.
    Bright frames are renders of the ground truth quantized to the 16-bit
    storage grid; events are simulated between consecutive stored bright
    frames (so the stream is exactly consistent with the saved frames)
    and then polluted with background-activity noise; dark frames are
    bright frames scaled by ``dark_gain`` plus sensor noise.
    """
    if views < 8:
        raise InvalidParameterError("need at least 8 views")
    if params is None:
        params = EventModelParams()
    lo, hi = (np.asarray(b, dtype=np.float64) for b in
              (bounds if bounds is not None else DEFAULT_BOUNDS))
    rng = np.random.default_rng(seed)

    diag = float(np.linalg.norm(hi - lo))
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    n = n_gaussians
    positions = center + rng.uniform(-0.55, 0.55, (n, 3)) * half
    quats = rng.normal(0.0, 1.0, (n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_scales = rng.uniform(np.log(0.035 * diag), np.log(0.085 * diag), (n, 3))
    opac = rng.uniform(logit(0.6), logit(0.97), n)
    k = (sh_degree + 1) ** 2
    sh = np.zeros((n, 3, k))
    sh[:, :, 0] = (rng.uniform(0.25, 0.85, (n, 3)) - 0.5) / SH_C0
    if k > 1:
        sh[:, :, 1:] = rng.uniform(-0.05, 0.05, (n, 3, k - 1))
    gt = GaussianCloud(positions, quats, log_scales, opac, sh)

    # dataset bounds hug the object so training clouds start on it
    margin = 0.5 * float(np.exp(log_scales.max()))
    ds_lo = positions.min(axis=0) - margin
    ds_hi = positions.max(axis=0) + margin

    W = H = int(image_size)
    fx = fy = 1.1 * W
    cams = []
    for i in range(views):
        theta = 2.0 * np.pi * i / views
        pos = center + np.array([radius * np.cos(theta),
                                 radius * np.sin(theta), 0.25 * radius])
        cams.append(Camera.look_at(pos, center, (0.0, 0.0, 1.0), fx, fy,
                                   W / 2.0, H / 2.0, W, H, timestamp=i * dt))

    bright = []
    for cam in cams:
        img, _ = render(gt, cam)
        bright.append(from_uint16(to_uint16(img)))   # snap to storage grid

    dark = []
    for i, img in enumerate(bright):
        noisy = img * dark_gain + rng.normal(0.0, sensor_noise, img.shape)
        dark.append(from_uint16(to_uint16(noisy)))

    streams = [simulate_events(bright[i], bright[i + 1], cams[i].timestamp,
                               cams[i + 1].timestamp, params)
               for i in range(views - 1)]
    events = EventStream(
        W, H,
        np.concatenate([s.t for s in streams]),
        np.concatenate([s.x for s in streams]),
        np.concatenate([s.y for s in streams]),
        np.concatenate([s.polarity for s in streams]))
    if noise_rate > 0:
        events = inject_dark_noise(events, noise_rate, seed=[seed, 1],
                                   span=(cams[0].timestamp, cams[-1].timestamp))

    return gt, Dataset(cams, dark, events, bright, (ds_lo, ds_hi))


# ---------------------------------------------------------------------------
# dataset directory io
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path):
    """Write the directory layout described in the module docstring."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cam0 = dataset.cameras[0]
    doc = {
        "intrinsics": {"fx": cam0.fx, "fy": cam0.fy, "cx": cam0.cx,
                       "cy": cam0.cy, "width": cam0.width,
                       "height": cam0.height},
        "views": [{"timestamp": cam.timestamp,
                   "world_to_camera": [float(v) for v in
                                       cam.world_to_camera.reshape(-1)]}
                  for cam in dataset.cameras],
        "bounds": {"lo": [float(v) for v in dataset.bounds[0]],
                   "hi": [float(v) for v in dataset.bounds[1]]},
    }
    with open(root / "poses.json", "w", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")

    (root / "dark").mkdir(exist_ok=True)
    for i, img in enumerate(dataset.dark_frames):
        write_png16(root / "dark" / f"{i:04d}.png", to_uint16(img))
    if dataset.bright_frames is not None:
        (root / "bright").mkdir(exist_ok=True)
        for i, img in enumerate(dataset.bright_frames):
            write_png16(root / "bright" / f"{i:04d}.png", to_uint16(img))
    save_events(dataset.events, root / "events.evs")


def load_poses(path):
    """Cameras (plus bounds) from a poses.json file."""
    path = Path(path)
    if not path.exists():
        raise ParseError("poses.json not found", path=str(path))
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"poses.json is not valid JSON: {exc.msg}",
                         path=str(path), line=exc.lineno)
    try:
        intr = doc["intrinsics"]
        cams = [Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                       intr["width"], intr["height"],
                       np.asarray(view["world_to_camera"],
                                  dtype=np.float64).reshape(3, 4),
                       timestamp=view["timestamp"])
                for view in doc["views"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"poses.json is missing or malformed: {exc}",
                         path=str(path))
    bounds = None
    if "bounds" in doc:
        bounds = (np.asarray(doc["bounds"]["lo"], dtype=np.float64),
                  np.asarray(doc["bounds"]["hi"], dtype=np.float64))
    return cams, bounds


def load_dataset(path) -> Dataset:
    root = Path(path)
    cams, bounds = load_poses(root / "poses.json")
    if bounds is None:
        bounds = DEFAULT_BOUNDS

    dark = []
    for i in range(len(cams)):
        frame = root / "dark" / f"{i:04d}.png"
        if not frame.exists():
            raise ParseError(f"missing dark frame {frame.name}", path=str(frame))
        dark.append(from_uint16(read_png16(frame)))

    bright = None
    if (root / "bright").is_dir():
        bright = []
        for i in range(len(cams)):
            frame = root / "bright" / f"{i:04d}.png"
            if not frame.exists():
                raise ParseError(f"missing bright frame {frame.name}",
                                 path=str(frame))
            bright.append(from_uint16(read_png16(frame)))

    if (root / "events.evs").exists():
        events = load_events(root / "events.evs")
    elif (root / "events.csv").exists():
        events = load_events(root / "events.csv")
    else:
        raise ParseError("no events.evs or events.csv in dataset",
                         path=str(root))
    return Dataset(cams, dark, events, bright, bounds)


# ---------------------------------------------------------------------------
# scene container
# ---------------------------------------------------------------------------

def save_scene(cloud: GaussianCloud, path, config_hash=0):
    """Serialize a cloud; float64 arrays round-trip bit-exactly."""
    n = len(cloud)
    header = (_SCENE_MAGIC
              + struct.pack("<HHQQ", _SCENE_VERSION, cloud.sh_degree, n,
                            config_hash & 0xFFFFFFFFFFFFFFFF))
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (cloud.positions, cloud.rotations, cloud.log_scales,
                    cloud.opacity_logits, cloud.sh_coeffs):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_scene(path, expected_sh_degree=None):
    """Load a serialized cloud; returns (GaussianCloud, config_hash)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _SCENE_MAGIC:
        raise CorruptFileError("bad magic, not a scene file", path=str(path),
                               offset=0)
    if len(blob) < 24:
        raise CorruptFileError("truncated scene header", path=str(path),
                               offset=len(blob))
    version, degree, n, config_hash = struct.unpack("<HHQQ", blob[4:24])
    if version != _SCENE_VERSION:
        raise UnsupportedVersionError(
            f"scene format version {version} is not supported", path=str(path))
    if degree > 3:
        raise CorruptFileError(f"implausible sh degree {degree}", path=str(path))
    if expected_sh_degree is not None and degree != expected_sh_degree:
        raise InvalidParameterError(
            f"scene has sh degree {degree}, expected {expected_sh_degree}")
    k = (degree + 1) ** 2
    counts = (3, 4, 3, 1, 3 * k)
    expected = 24 + 8 * n * sum(counts)
    if len(blob) != expected:
        raise CorruptFileError(
            f"scene payload has {len(blob)} bytes, expected {expected}",
            path=str(path))
    offset = 24
    arrays = []
    for cnt in counts:
        size = 8 * n * cnt
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n * cnt,
                                    offset=offset).copy())
        offset += size
    cloud = GaussianCloud(arrays[0].reshape(n, 3), arrays[1].reshape(n, 4),
                          arrays[2].reshape(n, 3), arrays[3],
                          arrays[4].reshape(n, 3, k))
    return cloud, config_hash
