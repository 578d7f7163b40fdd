"""Event-camera forward model, noise handling, and supervisory maps.

Events are triggered when the log-intensity of a pixel changes by more
than the contrast threshold between two frames. The working log mapping
is L(I) = log(I^g + kappa) with the gamma fixed at 2.2; both the ground
truth signal (accumulated event polarities) and the predicted signal
(log difference of two renders) live in this log-intensity domain, so the
quantized round trip through the simulator is bounded by one threshold.

Streams carry integer-microsecond timestamps. The DAVIS-style sensor is
color but the trigger model is scalar, so events are generated from and
compared against Rec.601 luminance of the linear images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptFileError, InvalidParameterError, ParseError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_EVS_MAGIC = b"EVS1"
_EVS_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


def luminance(img):
    """Rec.601 luminance plane of a linear (H, W, 3) image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidParameterError("expected an (H, W, 3) image")
    return img @ LUMA_WEIGHTS


def seconds_to_us(t):
    """Seconds to integer microseconds, rounding half up."""
    return np.floor(np.asarray(t, dtype=np.float64) * 1e6 + 0.5).astype(np.int64)


@dataclass
class EventModelParams:
    """Scalar constants of the sensor model and log mapping.

    epsilon: contrast threshold (log-intensity units); c: offset inside
    the trigger log to avoid log(0); g: gamma correction; kappa: offset of
    the prediction log map; w: default accumulation window in seconds.
    c defaults to kappa so simulated and predicted signals share one log
    mapping and the quantization round trip is exact.
    """

    epsilon: float = 0.2
    c: float = 1e-5
    g: float = 2.2
    kappa: float = 1e-5
    w: float = 0.1

    def __post_init__(self):
        if not (self.epsilon > 0 and self.kappa > 0 and self.g > 0 and self.c >= 0):
            raise InvalidParameterError("event model constants out of range")


@dataclass(frozen=True)
class Event:
    """One sensor event: integer-microsecond timestamp, pixel, polarity."""

    t: int
    x: int
    y: int
    polarity: int


@dataclass
class EventStream:
    """Time-sorted events over a width x height sensor (SoA layout)."""

    width: int
    height: int
    t: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    x: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    y: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    polarity: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.polarity = np.asarray(self.polarity, dtype=np.int64)
        n = self.t.size
        if not (self.x.size == self.y.size == self.polarity.size == n):
            raise InvalidParameterError("event arrays must have equal length")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise InvalidParameterError("event timestamps must be non-decreasing")
            if np.any(self.t < 0):
                raise InvalidParameterError("event timestamps must be non-negative")
            if (np.any(self.x < 0) or np.any(self.x >= self.width)
                    or np.any(self.y < 0) or np.any(self.y >= self.height)):
                raise InvalidParameterError("event coordinates outside the sensor")
            if np.any(np.abs(self.polarity) != 1):
                raise InvalidParameterError("polarity must be +1 or -1")

    def __len__(self):
        return self.t.size

    def __getitem__(self, i):
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]),
                     int(self.polarity[i]))

    def span_us(self):
        if len(self) == 0:
            raise InvalidParameterError("empty stream has no time span")
        return int(self.t[0]), int(self.t[-1])

    def select(self, idx):
        return EventStream(self.width, self.height, self.t[idx], self.x[idx],
                           self.y[idx], self.polarity[idx])


@dataclass
class EventMap:
    """Per-pixel accumulation: signed counts or log-intensity values."""

    values: np.ndarray
    units: str   # "counts" | "log"

    def __post_init__(self):
        if self.units not in ("counts", "log"):
            raise InvalidParameterError(f"unknown event map units {self.units!r}")
        if self.units == "counts":
            self.values = np.asarray(self.values)
            if not np.issubdtype(self.values.dtype, np.integer):
                raise InvalidParameterError("counts maps must hold integers")
        else:
            self.values = np.asarray(self.values, dtype=np.float64)
            if not np.all(np.isfinite(self.values)):
                raise InvalidParameterError("log maps must hold finite values")
        if self.values.ndim != 2:
            raise InvalidParameterError("event maps are 2D")

    @property
    def shape(self):
        return self.values.shape


def _log_intensity(plane, g, offset):
    return np.log(np.power(np.asarray(plane, dtype=np.float64), g) + offset)


def log_map(img, params: EventModelParams) -> EventMap:
    """L(I) = log(I^g + kappa) on the luminance plane of ``img``.

    ``img`` may be (H, W, 3) linear RGB (its luminance is taken) or an
    already-scalar (H, W) plane.
    """
    img = np.asarray(img, dtype=np.float64)
    plane = luminance(img) if img.ndim == 3 else img
    return EventMap(_log_intensity(plane, params.g, params.kappa), "log")


def _ragged_arange(starts, counts):
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    offs = np.repeat(np.cumsum(counts) - counts, counts)
    return np.arange(total, dtype=np.int64) - offs + np.repeat(starts, counts)


def simulate_events(prev, next_, t_prev, t_next,
                    params: EventModelParams) -> EventStream:
    """Quantized event generation between two frames.

    Per pixel, the log-luminance change Delta = log(next^g + c) -
    log(prev^g + c) triggers floor(|Delta| / epsilon) events of
    sign(Delta), with timestamps linearly spaced in (t_prev, t_next].
    """
    prev = np.asarray(prev, dtype=np.float64)
    next_ = np.asarray(next_, dtype=np.float64)
    if prev.shape != next_.shape:
        raise InvalidParameterError("frame dimensions differ")
    if not t_next > t_prev:
        raise InvalidParameterError("t_next must be after t_prev")
    lum_prev = luminance(prev) if prev.ndim == 3 else prev
    lum_next = luminance(next_) if next_.ndim == 3 else next_
    H, W = lum_prev.shape

    t0us = int(seconds_to_us(t_prev))
    t1us = int(seconds_to_us(t_next))
    if t1us <= t0us:
        raise InvalidParameterError("frame interval is below 1 microsecond")

    delta = (_log_intensity(lum_next, params.g, params.c)
             - _log_intensity(lum_prev, params.g, params.c))
    n = np.floor(np.abs(delta) / params.epsilon).astype(np.int64).ravel()
    sign = np.sign(delta).astype(np.int64).ravel()

    active = np.flatnonzero(n > 0)
    counts = n[active]
    flat = np.repeat(active, counts)
    k = _ragged_arange(np.zeros(active.size, dtype=np.int64), counts)
    frac = (k + 1).astype(np.float64) / np.repeat(counts, counts)
    t_us = np.floor(t_prev * 1e6 + frac * (t_next - t_prev) * 1e6 + 0.5)
    t_us = np.clip(t_us.astype(np.int64), t0us + 1, t1us)

    order = np.argsort(t_us, kind="stable")
    return EventStream(W, H, t_us[order], (flat % W)[order],
                       (flat // W)[order], np.repeat(sign[active], counts)[order])


def inject_dark_noise(stream: EventStream, rate, seed, span=None) -> EventStream:
    """Merge uniform background-activity noise into a stream.

    ``rate`` is events per pixel per second; noise pixels, polarities and
    timestamps are uniform over the sensor and the stream's span (or the
    explicit ``span=(t0_s, t1_s)`` in seconds). Deterministic per seed.
    """
    if rate < 0:
        raise InvalidParameterError("noise rate must be non-negative")
    if rate == 0:
        return stream
    if span is None:
        t0us, t1us = stream.span_us()
    else:
        t0us, t1us = (int(v) for v in seconds_to_us(np.asarray(span)))
    if t1us < t0us:
        raise InvalidParameterError("noise span is empty")

    rng = np.random.default_rng(seed)
    lam = rate * (t1us - t0us) * 1e-6 * stream.width * stream.height
    count = int(rng.poisson(lam))
    tn = np.sort(rng.integers(t0us, t1us + 1, count))
    xn = rng.integers(0, stream.width, count)
    yn = rng.integers(0, stream.height, count)
    pn = rng.integers(0, 2, count) * 2 - 1

    t = np.concatenate([stream.t, tn])
    order = np.argsort(t, kind="stable")
    return EventStream(
        stream.width, stream.height, t[order],
        np.concatenate([stream.x, xn])[order],
        np.concatenate([stream.y, yn])[order],
        np.concatenate([stream.polarity, pn])[order])


def y_filter_mask(stream: EventStream, window_us=10_000, neighborhood=3,
                  min_support=1):
    """Boolean keep-mask of the density filter (True = event survives).

    An event survives iff at least ``min_support`` other events occurred
    inside the (neighborhood x neighborhood) window centered on its pixel
    during [t - window_us, t]; simultaneous events support each other.
    """
    if window_us <= 0:
        raise InvalidParameterError("filter window must be positive")
    if neighborhood < 3 or neighborhood % 2 == 0:
        raise InvalidParameterError("neighborhood must be odd and >= 3")
    r = neighborhood // 2
    n = len(stream)
    keep = np.zeros(n, dtype=bool)
    if n == 0:
        return keep

    counts = np.zeros((stream.height + 2 * r, stream.width + 2 * r),
                      dtype=np.int64)
    t, xs, ys = stream.t, stream.x + r, stream.y + r
    added = 0
    left = 0
    j = 0
    while j < n:
        tj = t[j]
        j2 = j + 1
        while j2 < n and t[j2] == tj:
            j2 += 1
        while added < j2:
            counts[ys[added], xs[added]] += 1
            added += 1
        cutoff = tj - window_us
        while t[left] < cutoff:
            counts[ys[left], xs[left]] -= 1
            left += 1
        for e in range(j, j2):
            ye, xe = ys[e], xs[e]
            support = counts[ye - r:ye + r + 1, xe - r:xe + r + 1].sum() - 1
            keep[e] = support >= min_support
        j = j2
    return keep


def y_noise_filter(stream: EventStream, window_us=10_000, neighborhood=3,
                   min_support=1) -> EventStream:
    """Density-based denoiser: drop events without spatiotemporal support.

    The output is always a subsequence of the input.
    """
    return stream.select(y_filter_mask(stream, window_us, neighborhood,
                                       min_support))


def accumulate(stream: EventStream, t1, t2) -> EventMap:
    """Signed per-pixel polarity sum of events with t1 < t <= t2 (seconds)."""
    if not t2 > t1:
        raise InvalidParameterError("accumulation window is empty")
    t1us, t2us = int(seconds_to_us(t1)), int(seconds_to_us(t2))
    mask = (stream.t > t1us) & (stream.t <= t2us)
    flat = stream.y[mask] * stream.width + stream.x[mask]
    summed = np.bincount(flat, weights=stream.polarity[mask].astype(np.float64),
                         minlength=stream.width * stream.height)
    return EventMap(summed.reshape(stream.height, stream.width).astype(np.int64),
                    "counts")


def predicted_event_map(i1, i2, params: EventModelParams) -> EventMap:
    """Predicted cumulative log difference L(I2) - L(I1)."""
    i1 = np.asarray(i1, dtype=np.float64)
    i2 = np.asarray(i2, dtype=np.float64)
    if i1.shape != i2.shape:
        raise InvalidParameterError("frame dimensions differ")
    return EventMap(log_map(i2, params).values - log_map(i1, params).values,
                    "log")


def counts_to_log(emap: EventMap, epsilon) -> EventMap:
    """Scale a counts map by the contrast threshold into log units."""
    if emap.units != "counts":
        raise InvalidParameterError("expected a counts map")
    return EventMap(emap.values.astype(np.float64) * float(epsilon), "log")


# ---------------------------------------------------------------------------
# stream file formats
# ---------------------------------------------------------------------------

def write_events_text(stream: EventStream, path):
    """One `t_us,x,y,p` line per event after a `# width height` header."""
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# {stream.width} {stream.height}\n")
        for i in range(len(stream)):
            fh.write(f"{stream.t[i]},{stream.x[i]},{stream.y[i]},"
                     f"{stream.polarity[i]}\n")


def read_events_text(path) -> EventStream:
    with open(path, "r") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ParseError("missing `# width height` header", path=str(path),
                             line=1)
        try:
            width, height = (int(v) for v in header[1:].split())
        except ValueError as exc:
            raise ParseError(f"bad header: {exc}", path=str(path), line=1)
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError("expected t,x,y,p", path=str(path), line=lineno)
            try:
                rows.append([int(v) for v in parts])
            except ValueError as exc:
                raise ParseError(f"bad field: {exc}", path=str(path), line=lineno)
    data = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    try:
        return EventStream(width, height, data[:, 0], data[:, 1], data[:, 2],
                           data[:, 3])
    except InvalidParameterError as exc:
        raise ParseError(str(exc), path=str(path))


def write_events_binary(stream: EventStream, path):
    """Packed little-endian records after an `EVS1` + size header."""
    rec = np.empty(len(stream), dtype=_EVS_DTYPE)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.polarity
    with open(path, "wb") as fh:
        fh.write(_EVS_MAGIC)
        fh.write(np.uint16(stream.width).tobytes())
        fh.write(np.uint16(stream.height).tobytes())
        fh.write(rec.tobytes())


def read_events_binary(path) -> EventStream:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _EVS_MAGIC:
        raise CorruptFileError("bad magic, not an EVS1 stream", path=str(path),
                               offset=0)
    if len(blob) < 8:
        raise CorruptFileError("truncated header", path=str(path), offset=len(blob))
    width = int(np.frombuffer(blob, "<u2", count=1, offset=4)[0])
    height = int(np.frombuffer(blob, "<u2", count=1, offset=6)[0])
    body = blob[8:]
    if len(body) % _EVS_DTYPE.itemsize:
        raise CorruptFileError("truncated event record", path=str(path),
                               offset=8 + len(body))
    rec = np.frombuffer(body, dtype=_EVS_DTYPE)
    try:
        return EventStream(width, height, rec["t"].astype(np.int64),
                           rec["x"].astype(np.int64), rec["y"].astype(np.int64),
                           rec["p"].astype(np.int64))
    except InvalidParameterError as exc:
        raise CorruptFileError(str(exc), path=str(path))


def save_events(stream: EventStream, path):
    """Write text for .csv/.txt paths, binary otherwise."""
    if str(path).endswith((".csv", ".txt")):
        write_events_text(stream, path)
    else:
        write_events_binary(stream, path)


def load_events(path) -> EventStream:
    if str(path).endswith((".csv", ".txt")):
        return read_events_text(path)
    return read_events_binary(path)
