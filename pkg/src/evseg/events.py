"""Event-stream data model: windowing, reversal, voxel grids, frame rendering.

Events are stored struct-of-arrays (int64 columns) inside :class:`EventStream`;
timestamps are integer microseconds, polarity is strictly +1 / -1. All
operations are pure functions.

On-disk format (one stream per file)::

    # width=<W> height=<H>
    t x y p
    ...

sorted by t, with p in {1, -1}.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import kernels

POS_COLOR = (220, 60, 50)    # net-positive event mass
NEG_COLOR = (50, 90, 220)    # net-negative event mass
BG_COLOR = (255, 255, 255)


@dataclass(frozen=True)
class Event:
    """A single camera event."""
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events on a fixed sensor. Arrays are never mutated."""

    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    ps: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        for a in (self.xs, self.ys, self.ts, self.ps):
            if a.ndim != 1 or len(a) != len(self.ts):
                raise ValueError("event columns must be 1-D and equal length")
        if len(self.ts):
            if np.any(np.diff(self.ts) < 0):
                raise ValueError("events must be sorted by t (non-decreasing)")
            if self.ts[0] < 0:
                raise ValueError("timestamps must be non-negative")
            if np.any((self.xs < 0) | (self.xs >= self.width) |
                      (self.ys < 0) | (self.ys >= self.height)):
                raise ValueError("event coordinates outside sensor bounds")
            if np.any(np.abs(self.ps) != 1):
                raise ValueError("polarity must be exactly +1 or -1")

    def __len__(self):
        return len(self.ts)

    def __getitem__(self, i) -> Event:
        return Event(int(self.xs[i]), int(self.ys[i]), int(self.ts[i]), int(self.ps[i]))


def make_stream(xs, ys, ts, ps, width, height) -> EventStream:
    """Build a stream from array-likes, sorting by (t, y, x, p) canonically."""
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    ts = np.asarray(ts, dtype=np.int64)
    ps = np.asarray(ps, dtype=np.int64)
    order = np.lexsort((ps, xs, ys, ts))
    return EventStream(xs[order], ys[order], ts[order], ps[order], width, height)


def empty_stream(width, height) -> EventStream:
    z = np.empty(0, dtype=np.int64)
    return EventStream(z, z.copy(), z.copy(), z.copy(), width, height)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Signed event mass binned over (B, H, W); time window in microseconds."""

    data: np.ndarray
    t_start: int
    t_end: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("voxel grid must be B x H x W")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("voxel grid contains non-finite values")

    @property
    def num_bins(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class VoxelizationConfig:
    num_bins: int = 5
    width: int = 64
    height: int = 64
    t_start: int = 0
    t_end: int = 1

    def __post_init__(self):
        if self.num_bins < 1:
            raise ValueError("num_bins must be >= 1")
        if self.t_end <= self.t_start:
            raise ValueError("t_end must be greater than t_start")


def slice_window(stream: EventStream, t0: int, t1: int) -> EventStream:
    """Events with t0 <= t < t1, order preserved."""
    if t0 >= t1:
        raise ValueError(f"invalid interval [{t0}, {t1})")
    lo = np.searchsorted(stream.ts, t0, side="left")
    hi = np.searchsorted(stream.ts, t1, side="left")
    return EventStream(stream.xs[lo:hi], stream.ys[lo:hi], stream.ts[lo:hi],
                       stream.ps[lo:hi], stream.width, stream.height)


def select_backward(stream: EventStream, t_ref: int, n_forward: int,
                    ratio: int = 5) -> EventStream:
    """First ratio * n_forward events with t >= t_ref (fewer if exhausted)."""
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    lo = np.searchsorted(stream.ts, t_ref, side="left")
    hi = min(len(stream), lo + ratio * n_forward)
    return EventStream(stream.xs[lo:hi], stream.ys[lo:hi], stream.ts[lo:hi],
                       stream.ps[lo:hi], stream.width, stream.height)


def reverse(stream: EventStream) -> EventStream:
    """Time-reverse a stream within its own [t_min, t_max] window.

    (x, y, t, p) -> (x, y, t_min + t_max - t, -p), re-sorted by the new
    timestamp. Involution on canonically sorted streams.
    """
    if len(stream) == 0:
        return stream
    t_min = int(stream.ts[0])
    t_max = int(stream.ts[-1])
    return make_stream(stream.xs, stream.ys, t_min + t_max - stream.ts,
                       -stream.ps, stream.width, stream.height)


def voxelize(stream: EventStream, config: VoxelizationConfig) -> VoxelGrid:
    """Stack events into a voxel grid with linear temporal interpolation.

    Normalized time t* = (B-1)(t - t_start)/(t_end - t_start); each event
    adds p * max(0, 1 - |b - t*|) to bin b at its pixel. Per-event weights
    sum to 1, so total grid mass equals the polarity sum.
    """
    if stream.width != config.width or stream.height != config.height:
        raise ValueError("stream sensor size does not match voxelization config")
    if len(stream):
        if stream.ts[0] < config.t_start or stream.ts[-1] >= config.t_end:
            raise ValueError("events outside the voxelization window; slice first")
    span = float(config.t_end - config.t_start)
    tnorm = (config.num_bins - 1) * (stream.ts - config.t_start) / span
    data = kernels.voxel_accumulate(stream.xs, stream.ys, tnorm,
                                    stream.ps.astype(np.float64),
                                    config.num_bins, config.height, config.width)
    return VoxelGrid(data, config.t_start, config.t_end)


def net_mass(stream: EventStream) -> np.ndarray:
    """Per-pixel signed event count, shape (H, W)."""
    grid = np.zeros(stream.height * stream.width, dtype=np.int64)
    np.add.at(grid, stream.ys * stream.width + stream.xs, stream.ps)
    return grid.reshape(stream.height, stream.width)


def render_frame(stream: EventStream) -> np.ndarray:
    """Render an RGB uint8 image: red where net mass > 0, blue < 0, white none."""
    mass = net_mass(stream)
    img = np.empty((stream.height, stream.width, 3), dtype=np.uint8)
    img[:] = BG_COLOR
    img[mass > 0] = POS_COLOR
    img[mass < 0] = NEG_COLOR
    return img


def write_events(stream: EventStream, path) -> None:
    with open(path, "w") as f:
        f.write(f"# width={stream.width} height={stream.height}\n")
        for i in range(len(stream)):
            f.write(f"{stream.ts[i]} {stream.xs[i]} {stream.ys[i]} {stream.ps[i]}\n")


def read_events(path) -> EventStream:
    with open(path) as f:
        header = f.readline().strip()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing '# width=<W> height=<H>' header")
        fields = dict(tok.split("=") for tok in header[1:].split())
        width, height = int(fields["width"]), int(fields["height"])
        body = f.read().strip()
    if not body:
        return empty_stream(width, height)
    rows = np.loadtxt(body.splitlines(), dtype=np.int64, ndmin=2)
    return EventStream(rows[:, 1], rows[:, 2], rows[:, 0], rows[:, 3], width, height)


def save_frame_png(img: np.ndarray, path) -> None:
    from PIL import Image
    Image.fromarray(img, mode="RGB").save(os.fspath(path), format="PNG")
