"""Event simulation, voxel-grid encoding and event file I/O.

Events are held column-wise (``t``, ``x``, ``y``, ``p`` numpy arrays) since a
single clip easily produces 10^5 events; :class:`Event` is only the row view.
"""

import struct
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import IntegrityError, InvalidInputError
from .resize import downscale

EVS_MAGIC = b"EVS1"
_HEADER = struct.Struct("<4sIIQQQ")
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"),
                        ("pad", "V3")])
# fixed zip timestamp so voxel files are byte-reproducible
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
_COUNT_TOL = 1e-9


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass
class EventStream:
    """Time-sorted events from an (H, W) sensor over ``[t_start, t_end]`` us."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    sensor_size: tuple
    t_start: int
    t_end: int

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64).ravel()
        self.x = np.asarray(self.x, dtype=np.int64).ravel()
        self.y = np.asarray(self.y, dtype=np.int64).ravel()
        self.p = np.asarray(self.p, dtype=np.int8).ravel()
        self.sensor_size = (int(self.sensor_size[0]), int(self.sensor_size[1]))
        self.t_start = int(self.t_start)
        self.t_end = int(self.t_end)

    @classmethod
    def empty(cls, sensor_size, t_start, t_end):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, sensor_size, t_start, t_end)

    @classmethod
    def from_events(cls, events: Sequence[Event], sensor_size, t_start, t_end):
        if not events:
            return cls.empty(sensor_size, t_start, t_end)
        t, x, y, p = (np.array(col) for col in zip(*events))
        return cls(t, x, y, p, sensor_size, t_start, t_end)

    def __len__(self):
        return int(self.t.size)

    def __iter__(self) -> Iterator[Event]:
        for row in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(),
                       self.p.tolist()):
            yield Event(*row)

    @property
    def events(self):
        return list(self)

    def validate(self):
        """Check sort order, bounds and polarity; raise InvalidInputError."""
        h, w = self.sensor_size
        n = len(self)
        if not (self.x.size == self.y.size == self.p.size == n):
            raise InvalidInputError("event columns have different lengths")
        if n == 0:
            return self
        if np.any(np.diff(self.t) < 0):
            raise InvalidInputError("event timestamps are not sorted")
        if self.t[0] < self.t_start or self.t[-1] > self.t_end:
            raise InvalidInputError("event timestamps fall outside the window")
        if self.x.min() < 0 or self.x.max() >= w or self.y.min() < 0 or self.y.max() >= h:
            raise InvalidInputError("event coordinates outside the sensor")
        if not np.all(np.abs(self.p) == 1):
            raise InvalidInputError("polarity must be -1 or +1")
        return self

    def window(self, t0: int, t1: int, include_end: bool = False):
        """Return the events with ``t0 <= t < t1`` (``<=`` if include_end)."""
        lo = np.searchsorted(self.t, t0, side="left")
        hi = np.searchsorted(self.t, t1, side="right" if include_end else "left")
        sl = slice(lo, hi)
        return EventStream(self.t[sl], self.x[sl], self.y[sl], self.p[sl],
                           self.sensor_size, t0, t1)

    def per_pixel_counts(self, polarity=None):
        h, w = self.sensor_size
        sel = slice(None) if polarity is None else self.p == polarity
        counts = np.zeros(h * w, dtype=np.int64)
        np.add.at(counts, self.y[sel] * w + self.x[sel], 1)
        return counts.reshape(h, w)


@dataclass
class VoxelGrid:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise InvalidInputError(f"voxel grid must be (B, H, W), got {self.data.shape}")

    @property
    def bins(self) -> int:
        return int(self.data.shape[0])


@dataclass
class EventSimConfig:
    """Parameters of the threshold-crossing simulator.

    Args:
        contrast_threshold (float): Log-intensity step per event.
        log_eps (float): Offset added before the log to keep log(0) finite.
        noise_rate (float): Background events per pixel per second.
        seed (int): Seed for the noise process.
    """

    contrast_threshold: float = 0.15
    log_eps: float = 1e-3
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.contrast_threshold > 0:
            raise InvalidInputError("contrast_threshold must be positive")
        if not self.log_eps > 0:
            raise InvalidInputError("log_eps must be positive")
        if self.noise_rate < 0:
            raise InvalidInputError("noise_rate must be non-negative")


def _ranks(counts: np.ndarray) -> np.ndarray:
    """For group sizes ``counts`` return 1..n_i for each group, concatenated."""
    total = int(counts.sum())
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    return np.arange(total) - starts + 1


def simulate_events(frames, timestamps, cfg: EventSimConfig = None) -> EventStream:
    """Simulate an event camera observing a sequence of grayscale frames.

    Log intensity is linearly interpolated between consecutive frames; each
    pixel fires whenever it moves a full contrast threshold away from the level
    of its previous event, and the firing time is interpolated along the ramp.

    Args:
        frames: Sequence of K >= 2 grayscale frames (H, W) with values in [0, 1].
        timestamps: K strictly increasing timestamps in microseconds.
        cfg (EventSimConfig): Simulator parameters.

    Returns:
        EventStream: Events sorted by time over ``[timestamps[0], timestamps[-1]]``.
    """
    cfg = cfg or EventSimConfig()
    if len(frames) < 2:
        raise InvalidInputError("need at least two frames to simulate events")
    shapes = {np.shape(f) for f in frames}
    if len(shapes) != 1:
        raise InvalidInputError(f"frames have mismatched shapes: {sorted(shapes)}")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise InvalidInputError("frames must be grayscale (K, H, W)")
    ts = np.asarray(timestamps, dtype=np.int64)
    if ts.shape != (frames.shape[0],) or np.any(np.diff(ts) <= 0):
        raise InvalidInputError("timestamps must be strictly increasing, one per frame")
    if ts[0] < 0:
        raise InvalidInputError("timestamps must be non-negative")

    _, h, w = frames.shape
    c = float(cfg.contrast_threshold)
    logs = np.log(frames + cfg.log_eps).reshape(frames.shape[0], -1)
    ref = logs[0].copy()
    cols = {"t": [], "pix": [], "p": []}

    for k in range(frames.shape[0] - 1):
        l0, l1 = logs[k], logs[k + 1]
        t0, t1 = float(ts[k]), float(ts[k + 1])
        # tolerance absorbs rounding when a pixel returns exactly to an earlier level
        n_pos = np.where(l1 > ref, np.floor((l1 - ref) / c + _COUNT_TOL), 0).astype(np.int64)
        n_neg = np.where(l1 < ref, np.floor((ref - l1) / c + _COUNT_TOL), 0).astype(np.int64)
        for sign, n in ((1, n_pos), (-1, n_neg)):
            pix = np.flatnonzero(n)
            if pix.size == 0:
                continue
            counts = n[pix]
            pix = np.repeat(pix, counts)
            level = ref[pix] + sign * _ranks(counts) * c
            slope = l1[pix] - l0[pix]
            frac = np.clip((level - l0[pix]) / slope, 0.0, 1.0)
            cols["t"].append(np.rint(t0 + frac * (t1 - t0)).astype(np.int64))
            cols["pix"].append(pix)
            cols["p"].append(np.full(pix.size, sign, dtype=np.int8))
        ref = ref + (n_pos - n_neg) * c

    t_start, t_end = int(ts[0]), int(ts[-1])
    if cfg.noise_rate > 0:
        rng = np.random.default_rng(cfg.seed)
        expected = cfg.noise_rate * h * w * (t_end - t_start) * 1e-6
        n_noise = int(rng.poisson(expected))
        cols["t"].append(rng.integers(t_start, t_end, size=n_noise, endpoint=True))
        cols["pix"].append(rng.integers(0, h * w, size=n_noise))
        cols["p"].append(rng.choice(np.array([-1, 1], dtype=np.int8), size=n_noise))

    if not cols["t"]:
        return EventStream.empty((h, w), t_start, t_end)
    t = np.concatenate(cols["t"])
    pix = np.concatenate(cols["pix"])
    p = np.concatenate(cols["p"])
    order = np.argsort(t, kind="stable")
    pix = pix[order]
    return EventStream(t[order], pix % w, pix // w, p[order], (h, w), t_start, t_end)


def voxelize(stream: EventStream, bins: int = 5) -> VoxelGrid:
    """Accumulate events into ``bins`` temporal bins with linear time weights.

    The window is mapped onto ``[0, bins - 1]`` so events at ``t_start`` and
    ``t_end`` land exactly on the first and last bin.
    """
    if bins < 1:
        raise InvalidInputError("bins must be >= 1")
    if stream.t_end <= stream.t_start:
        raise InvalidInputError(
            f"degenerate event window [{stream.t_start}, {stream.t_end}]")
    h, w = stream.sensor_size
    grid = np.zeros(bins * h * w, dtype=np.float64)
    if len(stream):
        span = stream.t_end - stream.t_start
        tau = (stream.t - stream.t_start).astype(np.float64) / span * (bins - 1)
        lower = np.clip(np.floor(tau).astype(np.int64), 0, bins - 1)
        frac = tau - lower
        pol = stream.p.astype(np.float64)
        pix = stream.y * w + stream.x
        np.add.at(grid, lower * h * w + pix, pol * (1.0 - frac))
        upper = lower + 1
        ok = (upper < bins) & (frac > 0)
        np.add.at(grid, upper[ok] * h * w + pix[ok], pol[ok] * frac[ok])
    return VoxelGrid(grid.reshape(bins, h, w).astype(np.float32))


def downsample_voxel(grid: VoxelGrid, factor: int = 4) -> VoxelGrid:
    """Bicubic-downsample each temporal bin independently."""
    _, h, w = grid.data.shape
    if h % factor or w % factor:
        raise InvalidInputError(
            f"voxel size {h}x{w} is not divisible by factor {factor}")
    small = downscale(grid.data.astype(np.float64), factor)
    return VoxelGrid(small.astype(np.float32))


def normalize_voxel(data: np.ndarray) -> np.ndarray:
    """Scale a voxel grid by its max-abs value, clamped to [-1, 1]."""
    data = np.asarray(data, dtype=np.float32)
    peak = float(np.abs(data).max()) if data.size else 0.0
    if peak == 0.0:
        return np.zeros_like(data)
    return np.clip(data / peak, -1.0, 1.0)


def write_events(path, stream: EventStream) -> None:
    """Write ``stream`` in the little-endian EVS1 binary format."""
    h, w = stream.sensor_size
    rec = np.zeros(len(stream), dtype=EVENT_DTYPE)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    header = _HEADER.pack(EVS_MAGIC, h, w, stream.t_start, stream.t_end, len(stream))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_events(path) -> EventStream:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise IntegrityError(f"{path}: truncated event header")
    magic, h, w, t_start, t_end, count = _HEADER.unpack_from(raw)
    if magic != EVS_MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + count * EVENT_DTYPE.itemsize
    if len(raw) != expected:
        raise IntegrityError(f"{path}: expected {expected} bytes, found {len(raw)}")
    rec = np.frombuffer(raw, dtype=EVENT_DTYPE, count=count, offset=_HEADER.size)
    stream = EventStream(rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"],
                         (h, w), t_start, t_end)
    try:
        return stream.validate()
    except InvalidInputError as exc:
        raise IntegrityError(f"{path}: {exc}") from exc


def save_voxel(path, grid: VoxelGrid) -> None:
    """Store a voxel grid as an ``.npz`` container under the key ``voxel``."""
    info = zipfile.ZipInfo("voxel.npy", date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    with zipfile.ZipFile(path, "w") as zf:
        with zf.open(info, "w", force_zip64=True) as fh:
            np.lib.format.write_array(fh, grid.data.astype(np.float32),
                                      allow_pickle=False)


def load_voxel(path) -> VoxelGrid:
    with np.load(path, allow_pickle=False) as npz:
        return VoxelGrid(npz["voxel"])
