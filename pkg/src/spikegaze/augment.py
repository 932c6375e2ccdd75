"""Training-time transforms over (window, labels) pairs.

Windows are (T, 2, 60, 80) count tensors; labels are (T, 2) grid-pixel
(x, y) arrays. Per-frame blink flags only move under temporal transforms,
which ``augment`` handles. All transforms return new arrays.
"""

from dataclasses import dataclass

import numpy as np

from . import GRID_HEIGHT, GRID_WIDTH


@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_tflip: float = 0.5
    max_spatial_shift: int = 8
    max_temporal_shift: int = 25
    cutout_count: int = 1
    cutout_max_xy: int = 20
    cutout_max_t: int = 50
    rng_seed: int = 0
    enabled: bool = True

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_tflip"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        if self.max_spatial_shift < 0 or self.max_temporal_shift < 0 or self.cutout_count < 0:
            raise ValueError("shift limits and cutout count must be non-negative")
        if self.cutout_max_xy <= 0 or self.cutout_max_t <= 0:
            raise ValueError("cutout extents must be positive")


def hflip(window, labels):
    out = window[..., ::-1].copy()
    lab = labels.copy()
    lab[:, 0] = (GRID_WIDTH - 1) - lab[:, 0]
    return out, lab


def vflip(window, labels):
    out = window[..., ::-1, :].copy()
    lab = labels.copy()
    lab[:, 1] = (GRID_HEIGHT - 1) - lab[:, 1]
    return out, lab


def tflip(window, labels):
    """Play the window backwards; reversed motion flips every event's polarity."""
    return window[::-1, ::-1].copy(), labels[::-1].copy()


def _shift_axis(a, d, axis):
    if d == 0:
        return a
    out = np.zeros_like(a)
    n = a.shape[axis]
    if abs(d) >= n:
        return out
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if d > 0:
        src[axis], dst[axis] = slice(0, n - d), slice(d, n)
    else:
        src[axis], dst[axis] = slice(-d, n), slice(0, n + d)
    out[tuple(dst)] = a[tuple(src)]
    return out


def shift(window, labels, dx=0, dy=0, dt=0, source=None):
    """Translate counts by (dx, dy) pixels and dt bins.

    Content pushed past a border is discarded and the exposed strip is zero.
    Labels move with the content and are clamped onto the grid. For a
    temporal shift, ``source`` may be a callable ``source(dt) -> (window,
    labels)`` returning the window re-sliced dt bins later in the session;
    without it the frames roll with zero fill and labels hold their edge value.
    """
    lab = labels.copy()
    if dt:
        if source is not None:
            window, lab = source(dt)
            lab = lab.copy()
        else:
            window = _shift_axis(window, -dt, 0)
            idx = np.clip(np.arange(len(lab)) + dt, 0, len(lab) - 1)
            lab = lab[idx]
    out = _shift_axis(_shift_axis(window, dx, 3), dy, 2)
    if out is window:
        out = window.copy()
    lab[:, 0] = np.clip(lab[:, 0] + dx, 0, GRID_WIDTH - 1)
    lab[:, 1] = np.clip(lab[:, 1] + dy, 0, GRID_HEIGHT - 1)
    return out, lab


def cutout_boxes(window_shape, cfg, rng):
    """Sample ``cfg.cutout_count`` boxes as (t0, t1, y0, y1, x0, x1)."""
    T, _, H, W = window_shape
    boxes = []
    for _ in range(cfg.cutout_count):
        et = int(rng.integers(1, min(cfg.cutout_max_t, T) + 1))
        ey = int(rng.integers(1, min(cfg.cutout_max_xy, H) + 1))
        ex = int(rng.integers(1, min(cfg.cutout_max_xy, W) + 1))
        t0 = int(rng.integers(0, T - et + 1))
        y0 = int(rng.integers(0, H - ey + 1))
        x0 = int(rng.integers(0, W - ex + 1))
        boxes.append((t0, t0 + et, y0, y0 + ey, x0, x0 + ex))
    return boxes


def apply_cutout(window, boxes):
    out = window.copy()
    for t0, t1, y0, y1, x0, x1 in boxes:
        out[t0:t1, :, y0:y1, x0:x1] = 0
    return out


def event_cutout(window, cfg, rng):
    """Zero ``cfg.cutout_count`` random spatio-temporal boxes in both channels."""
    return apply_cutout(window, cutout_boxes(window.shape, cfg, rng))


def augment(window, labels, blink, cfg, rng, source=None):
    """Random composition: temporal shift, flips, spatial shift, cutout.

    ``source(dt)`` (optional) re-slices the session dt bins later and returns
    (window, labels, blink); without it the temporal shift zero-fills.
    Returns transformed (window, labels, blink).
    """
    if not cfg.enabled:
        return window, labels, blink
    m = cfg.max_temporal_shift
    dt = int(rng.integers(-m, m + 1)) if m else 0
    if dt:
        if source is not None:
            window, labels, blink = source(dt)
        else:
            window, labels = shift(window, labels, dt=dt)
            blink = blink[np.clip(np.arange(len(blink)) + dt, 0, len(blink) - 1)]
    if rng.random() < cfg.p_hflip:
        window, labels = hflip(window, labels)
    if rng.random() < cfg.p_vflip:
        window, labels = vflip(window, labels)
    if rng.random() < cfg.p_tflip:
        window, labels = tflip(window, labels)
        blink = blink[::-1]
    s = cfg.max_spatial_shift
    dx = int(rng.integers(-s, s + 1)) if s else 0
    dy = int(rng.integers(-s, s + 1)) if s else 0
    if dx or dy:
        window, labels = shift(window, labels, dx, dy)
    if cfg.cutout_count:
        window = event_cutout(window, cfg, rng)
    return window, labels, np.ascontiguousarray(blink)
