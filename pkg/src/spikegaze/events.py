"""Event and label ingestion, 1 ms binning, label upsampling, windowing.

CSV formats (header line optional):

    events:  t_us,x,y,p        integers; x in 0..639, y in 0..479, p in {1, -1} (0 is read as -1)
    labels:  t_us,x,y,blink    x, y in sensor pixels (float), blink in {0, 1}

Frames are 2 x 60 x 80 count grids: channel 0 counts positive events,
channel 1 negative ones, after mapping (x, y) -> (x // 8, y // 8).
Frame k holds events with k*bin <= t < (k+1)*bin.
"""

import csv
import logging
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from . import DOWNSAMPLE, GRID_HEIGHT, GRID_WIDTH, SENSOR_HEIGHT, SENSOR_WIDTH

logger = logging.getLogger(__name__)

EVENT_DTYPE = np.dtype([("t", "<i8"), ("x", "<i2"), ("y", "<i2"), ("p", "i1")])


class DataFormatError(ValueError):
    """Malformed or out-of-range input data (carries the offending line number)."""

    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def make_events(t, x, y, p):
    """Pack parallel arrays into a time-sorted event array."""
    ev = np.empty(len(t), dtype=EVENT_DTYPE)
    ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
    return sort_events(ev)


def sort_events(events):
    order = np.argsort(events["t"], kind="stable")
    return events[order]


def _has_header(first_line):
    head = first_line.split(",")[0].strip()
    try:
        float(head)
        return False
    except ValueError:
        return True


def _read_rows(path, n_fields):
    """Yield (line_number, [str fields]) for data rows; header skipped."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row or all(not f.strip() for f in row):
                continue
            if reader.line_num == 1 and _has_header(row[0] if row else ""):
                continue
            if len(row) != n_fields:
                raise DataFormatError(path, reader.line_num,
                                      f"expected {n_fields} fields, got {len(row)}")
            yield reader.line_num, row


def load_events(path):
    """Parse an event CSV into a stably time-sorted event array."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such event file: {path}")
    cols = [[], [], [], []]
    for line, row in _read_rows(path, 4):
        try:
            t, x, y, p = (int(f) for f in row)
        except ValueError:
            raise DataFormatError(path, line, f"non-integer field in {row!r}") from None
        if t < 0:
            raise DataFormatError(path, line, f"negative timestamp {t}")
        if not (0 <= x < SENSOR_WIDTH and 0 <= y < SENSOR_HEIGHT):
            raise DataFormatError(path, line, f"coordinate ({x}, {y}) outside {SENSOR_WIDTH}x{SENSOR_HEIGHT}")
        if p not in (1, -1, 0):
            raise DataFormatError(path, line, f"polarity {p} not in {{1, -1}}")
        for c, v in zip(cols, (t, x, y, 1 if p == 1 else -1)):
            c.append(v)
    return make_events(*cols)


def write_events(path, events):
    data = np.column_stack([events["t"], events["x"], events["y"], events["p"]]).astype(np.int64)
    np.savetxt(path, data, fmt="%d", delimiter=",", header="t_us,x,y,p", comments="")


@dataclass
class LabelTrack:
    """Pupil centre in 80 x 60 grid pixels plus blink flags, sampled at ``rate_hz``."""

    rate_hz: float
    x: np.ndarray
    y: np.ndarray
    blink: np.ndarray
    t0_ms: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.blink = np.asarray(self.blink, dtype=bool)
        if not (len(self.x) == len(self.y) == len(self.blink)):
            raise ValueError("label arrays differ in length")

    def __len__(self):
        return len(self.x)

    @property
    def times_ms(self):
        return self.t0_ms + np.arange(len(self)) * (1000.0 / self.rate_hz)

    @property
    def xy(self):
        return np.column_stack([self.x, self.y])

    def slice(self, start, stop):
        return LabelTrack(self.rate_hz, self.x[start:stop], self.y[start:stop],
                          self.blink[start:stop], self.t0_ms + start * 1000.0 / self.rate_hz)


def load_labels(path, scale=DOWNSAMPLE):
    """Parse a label CSV; coordinates are divided by ``scale`` into grid space."""
    ts, xs, ys, bs = [], [], [], []
    for line, row in _read_rows(path, 4):
        try:
            t, x, y = float(row[0]), float(row[1]), float(row[2])
            b = int(float(row[3]))
        except ValueError:
            raise DataFormatError(path, line, f"unparseable row {row!r}") from None
        if b not in (0, 1):
            raise DataFormatError(path, line, f"blink flag {b} not in {{0, 1}}")
        ts.append(t)
        xs.append(x / scale)
        ys.append(y / scale)
        bs.append(b)
    if len(ts) < 2:
        raise DataFormatError(path, 0, "need at least two label rows to infer the rate")
    ts = np.asarray(ts)
    if np.any(np.diff(ts) <= 0):
        raise DataFormatError(path, 0, "label timestamps must be strictly increasing")
    period_us = float(np.median(np.diff(ts)))
    return LabelTrack(1e6 / period_us, xs, ys, bs, t0_ms=ts[0] / 1000.0)


def write_labels(path, track, scale=DOWNSAMPLE):
    t_us = np.round(track.times_ms * 1000.0).astype(np.int64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_us", "x", "y", "blink"])
        for t, x, y, b in zip(t_us, track.x * scale, track.y * scale, track.blink):
            w.writerow([int(t), f"{x:.4f}", f"{y:.4f}", int(b)])


def interpolate_labels(track, target_rate=1000.0, duration_ms=None):
    """Upsample with a natural cubic spline per coordinate.

    Output samples sit at k / target_rate for k = 0 .. n-1, where n covers
    ``duration_ms`` (default: up to the last source sample). Times outside
    the source span hold the edge values. Blink flags take the nearest
    source sample.
    """
    if len(track) < 4:
        raise ValueError(f"need at least 4 label samples for a cubic spline, got {len(track)}")
    src_t = track.times_ms
    if duration_ms is None:
        duration_ms = src_t[-1] + 1000.0 / target_rate
    n = int(np.floor(duration_ms * target_rate / 1000.0 + 1e-9))
    t = np.arange(n) * (1000.0 / target_rate)
    tc = np.clip(t, src_t[0], src_t[-1])
    x = CubicSpline(src_t, track.x, bc_type="natural")(tc)
    y = CubicSpline(src_t, track.y, bc_type="natural")(tc)
    nearest = np.clip(np.floor((t - track.t0_ms) * track.rate_hz / 1000.0 + 0.5), 0, len(track) - 1)
    return LabelTrack(float(target_rate), x, y, track.blink[nearest.astype(int)], t0_ms=0.0)


class BinnedFrames:
    """Sparse store of a session's binned frames.

    Counts live as sorted (frame, channel, y, x) keys with multiplicities, so a
    minute of events costs megabytes, not gigabytes. Dense views are built per
    frame or per window.
    """

    shape = (2, GRID_HEIGHT, GRID_WIDTH)

    def __init__(self, keys, counts, n_frames, bin_ms=1.0, dropped=0):
        self.keys = np.asarray(keys, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int32)
        self.n_frames = int(n_frames)
        self.bin_ms = bin_ms
        self.dropped = int(dropped)
        plane = int(np.prod(self.shape))
        self._frame_of = self.keys // plane
        self._offset = self.keys % plane
        self._ptr = np.searchsorted(self._frame_of, np.arange(self.n_frames + 1))

    def __len__(self):
        return self.n_frames

    def total(self):
        return int(self.counts.sum())

    def events_per_frame(self):
        return np.bincount(self._frame_of, weights=self.counts, minlength=self.n_frames).astype(np.int64)

    def frame(self, k, dtype=np.int32):
        out = np.zeros(int(np.prod(self.shape)), dtype=dtype)
        lo, hi = self._ptr[k], self._ptr[k + 1]
        out[self._offset[lo:hi]] = self.counts[lo:hi]
        return out.reshape(self.shape)

    def window(self, start, length, dtype=np.float32):
        """Dense (length, 2, 60, 80) block; frames past the end are zero."""
        plane = int(np.prod(self.shape))
        out = np.zeros((length, plane), dtype=dtype)
        s = max(start, 0)
        e = min(start + length, self.n_frames)
        if e > s:
            lo, hi = self._ptr[s], self._ptr[e]
            out[self._frame_of[lo:hi] - start, self._offset[lo:hi]] = self.counts[lo:hi]
        return out.reshape(length, *self.shape)

    def to_dense(self, dtype=np.int32):
        return self.window(0, self.n_frames, dtype=dtype)


def bin_events(events, bin_ms=1.0, duration_ms=None, scale=DOWNSAMPLE):
    """Count events per (bin, polarity, y // scale, x // scale).

    Events at or beyond ``duration_ms`` are dropped and counted in
    ``BinnedFrames.dropped``. Input order does not matter.
    """
    t = np.asarray(events["t"], dtype=np.int64)
    if duration_ms is None:
        duration_ms = (int(t.max()) // 1000 + 1) if t.size else 0
    bin_us = int(round(bin_ms * 1000))
    n_frames = int(np.ceil(duration_ms * 1000 / bin_us))
    keep = t < duration_ms * 1000
    dropped = int(t.size - keep.sum())
    if dropped:
        logger.debug("dropped %d events beyond %s ms", dropped, duration_ms)
    k = t[keep] // bin_us
    c = np.where(events["p"][keep] > 0, 0, 1)
    gy = events["y"][keep].astype(np.int64) // scale
    gx = events["x"][keep].astype(np.int64) // scale
    key = ((k * 2 + c) * GRID_HEIGHT + gy) * GRID_WIDTH + gx
    uniq, counts = np.unique(key, return_counts=True)
    return BinnedFrames(uniq, counts, n_frames, bin_ms=bin_ms, dropped=dropped)


def window_starts(n_frames, window=450, stride=1):
    if n_frames < window:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, n_frames - window + 1, stride, dtype=np.int64)


@dataclass
class Session:
    """One recording: binned frames and 1 kHz labels, aligned at frame index."""

    name: str
    frames: BinnedFrames
    labels: LabelTrack

    def __post_init__(self):
        if self.labels.rate_hz != 1000.0 / self.frames.bin_ms:
            raise ValueError("labels must be at the frame rate; call interpolate_labels first")

    def __len__(self):
        return min(len(self.frames), len(self.labels))


def session_to_tensors(session, window_ms=450, stride_ms=1, dtype=np.float32):
    """Yield (window (T, 2, 60, 80), labels (T, 2) grid px, blink (T,)) for every window start."""
    T = int(round(window_ms / session.frames.bin_ms))
    stride = max(1, int(round(stride_ms / session.frames.bin_ms)))
    starts = window_starts(len(session), T, stride)
    if starts.size == 0:
        warnings.warn(f"session {session.name!r} ({len(session)} frames) is shorter than the {T}-frame window")
    xy = session.labels.xy
    for s in starts:
        yield session.frames.window(s, T, dtype=dtype), xy[s:s + T], session.labels.blink[s:s + T]


def load_session(directory, scale=DOWNSAMPLE, name=None):
    """Read ``events.csv`` and ``labels.csv`` from a session directory."""
    events = load_events(os.path.join(directory, "events.csv"))
    track = load_labels(os.path.join(directory, "labels.csv"), scale=scale)
    duration_ms = track.times_ms[-1] + 1000.0 / track.rate_hz
    frames = bin_events(events, duration_ms=duration_ms, scale=scale)
    labels = interpolate_labels(track, 1000.0 / frames.bin_ms, duration_ms=len(frames) * frames.bin_ms)
    return Session(name or os.path.basename(os.path.normpath(directory)), frames, labels)


def load_dataset(root, scale=DOWNSAMPLE):
    """All session sub-directories of ``root`` (sorted by name)."""
    names = sorted(d for d in os.listdir(root) if os.path.isfile(os.path.join(root, d, "events.csv")))
    return [load_session(os.path.join(root, d), scale=scale, name=d) for d in names]
