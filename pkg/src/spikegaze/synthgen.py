"""Deterministic synthetic eye recordings: gaze trajectory + DVS events.

The scene is a dark anti-aliased disk (pupil) on a bright field, with an
eyelid modelled as a horizontal occluder that sweeps down and back up
during blinks. Each 1 ms render is compared per pixel with the log
intensity memorised at that pixel's last event; every whole multiple of the
contrast threshold emits one event of the matching sign.
"""

import os
from dataclasses import asdict, dataclass

import numpy as np

from . import DOWNSAMPLE
from .events import EVENT_DTYPE, LabelTrack, write_events, write_labels


@dataclass
class SceneConfig:
    width: int = 640
    height: int = 480
    pupil_radius: float = 40.0          # sensor px
    background: float = 0.6             # linear intensities
    pupil: float = 0.15
    lid: float = 0.5
    contrast_threshold: float = 0.25    # log-intensity units
    px_per_deg: float = 16.0
    saccade_min_deg: float = 2.0
    saccade_max_deg: float = 15.0
    ms_per_deg: float = 2.2             # main sequence: duration = ms_per_deg * A + intercept
    saccade_intercept_ms: float = 21.0
    p_saccade: float = 0.7
    p_pursuit: float = 0.2
    fixation_min_ms: float = 150.0
    fixation_max_ms: float = 600.0
    fixation_jitter_px: float = 0.6     # stationary s.d. of fixational drift
    drift_tau_ms: float = 200.0
    pursuit_min_deg_s: float = 5.0
    pursuit_max_deg_s: float = 25.0
    pursuit_min_ms: float = 200.0
    pursuit_max_ms: float = 600.0
    blink_rate_hz: float = 0.2
    blink_min_ms: float = 150.0
    blink_max_ms: float = 300.0
    margin: float = 100.0               # keep the pupil centre this far from the sensor edge
    duration_ms: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.pupil_radius <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("scene geometry must be positive")
        if self.contrast_threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if min(self.background, self.pupil, self.lid) <= 0:
            raise ValueError("intensities must be positive (log domain)")

    @property
    def blink_fraction(self):
        """Expected fraction of time spent blinking."""
        return self.blink_rate_hz * 0.5 * (self.blink_min_ms + self.blink_max_ms) / 1000.0

    def bounds(self):
        m_x = min(self.margin, self.width / 2)
        m_y = min(self.margin, self.height / 2)
        return (m_x, self.width - m_x), (m_y, self.height - m_y)


@dataclass
class Trajectory:
    """1 kHz ground truth in sensor pixels; ``lid`` is the eyelid edge row (0 = open)."""

    x: np.ndarray
    y: np.ndarray
    blink: np.ndarray
    lid: np.ndarray

    def __len__(self):
        return len(self.x)

    def labels(self, scale=DOWNSAMPLE):
        return LabelTrack(1000.0, self.x / scale, self.y / scale, self.blink)

    def labels_100hz(self, scale=DOWNSAMPLE):
        idx = np.arange(0, len(self), 10)
        return LabelTrack(100.0, self.x[idx] / scale, self.y[idx] / scale, self.blink[idx])


def min_jerk(n):
    """Minimum-jerk position profile over n samples, 0 -> 1."""
    tau = np.arange(1, n + 1) / n
    return 10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5


def _blink_schedule(cfg, rng, n):
    blink = np.zeros(n, dtype=bool)
    lid = np.zeros(n)
    if cfg.blink_rate_hz <= 0:
        return blink, lid
    mean_dur = 0.5 * (cfg.blink_min_ms + cfg.blink_max_ms)
    mean_gap = max(1000.0 / cfg.blink_rate_hz - mean_dur, 1.0)
    t = rng.exponential(mean_gap)
    while t < n:
        dur = rng.uniform(cfg.blink_min_ms, cfg.blink_max_ms)
        t0 = int(t)
        t1 = min(int(t + dur), n)
        blink[t0:t1] = True
        close_n = max(int(0.3 * dur), 1)
        hold_n = max(int(0.3 * dur), 0)
        open_n = max(int(dur) - close_n - hold_n, 1)
        prof = np.concatenate([
            0.5 - 0.5 * np.cos(np.pi * np.arange(1, close_n + 1) / close_n),
            np.ones(hold_n),
            0.5 + 0.5 * np.cos(np.pi * np.arange(1, open_n + 1) / open_n),
        ]) * cfg.height
        seg = lid[t0:t0 + len(prof)]
        seg[:] = prof[:len(seg)]
        t = t + dur + rng.exponential(mean_gap)
    return blink, lid


def gen_trajectory(cfg):
    """Fixations with drift, minimum-jerk saccades, pursuit ramps and blinks."""
    rng = np.random.default_rng(cfg.seed)
    n = int(cfg.duration_ms)
    (x_lo, x_hi), (y_lo, y_hi) = cfg.bounds()
    pos = np.empty((n, 2))
    anchor = np.array([rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)])
    drift = np.zeros(2)
    a = np.exp(-1.0 / cfg.drift_tau_ms) if cfg.drift_tau_ms > 0 else 0.0
    kick = cfg.fixation_jitter_px * np.sqrt(1 - a * a)
    lo = np.array([x_lo, y_lo])
    hi = np.array([x_hi, y_hi])
    t = 0
    mode = "fixation"
    while t < n:
        if mode == "fixation":
            m = int(rng.uniform(cfg.fixation_min_ms, cfg.fixation_max_ms))
            for i in range(t, min(t + m, n)):
                if kick > 0:
                    drift = a * drift + kick * rng.standard_normal(2)
                pos[i] = np.clip(anchor + drift, lo, hi)
            t += m
            r = rng.random()
            mode = "saccade" if r < cfg.p_saccade else ("pursuit" if r < cfg.p_saccade + cfg.p_pursuit else "fixation")
        elif mode == "saccade":
            start = pos[t - 1] if t > 0 else anchor
            target = None
            for _ in range(20):
                amp = rng.uniform(cfg.saccade_min_deg, cfg.saccade_max_deg) * cfg.px_per_deg
                ang = rng.uniform(0, 2 * np.pi)
                cand = start + amp * np.array([np.cos(ang), np.sin(ang)])
                if np.all(cand >= lo) and np.all(cand <= hi):
                    target = cand
                    break
            if target is None:
                target = np.clip(cand, lo, hi)
            amp_deg = np.linalg.norm(target - start) / cfg.px_per_deg
            m = max(int(round(cfg.ms_per_deg * amp_deg + cfg.saccade_intercept_ms)), 1)
            prof = min_jerk(m)[:, None]
            seg = start + prof * (target - start)
            k = min(m, n - t)
            pos[t:t + k] = seg[:k]
            t += m
            anchor, drift = target, np.zeros(2)
            mode = "fixation"
        else:
            start = pos[t - 1] if t > 0 else anchor
            speed = rng.uniform(cfg.pursuit_min_deg_s, cfg.pursuit_max_deg_s) * cfg.px_per_deg / 1000.0
            ang = rng.uniform(0, 2 * np.pi)
            m = int(rng.uniform(cfg.pursuit_min_ms, cfg.pursuit_max_ms))
            steps = np.arange(1, m + 1)[:, None]
            seg = np.clip(start + steps * speed * np.array([np.cos(ang), np.sin(ang)]), lo, hi)
            k = min(m, n - t)
            pos[t:t + k] = seg[:k]
            t += m
            anchor, drift = seg[-1], np.zeros(2)
            mode = "fixation"
    blink, lid = _blink_schedule(cfg, rng, n)
    return Trajectory(pos[:, 0].copy(), pos[:, 1].copy(), blink, lid)


def render_log_intensity(cfg, cx, cy, lid_row, y0=0, y1=None, x0=0, x1=None):
    """Log intensity of the scene over rows [y0, y1) and columns [x0, x1)."""
    y1 = cfg.height if y1 is None else y1
    x1 = cfg.width if x1 is None else x1
    ys = np.arange(y0, y1, dtype=np.float64)[:, None]
    xs = np.arange(x0, x1, dtype=np.float64)[None, :]
    dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    cover = np.clip(cfg.pupil_radius + 0.5 - dist, 0.0, 1.0)
    img = cfg.background + (cfg.pupil - cfg.background) * cover
    if lid_row > 0:
        lc = np.clip(lid_row - ys + 0.5, 0.0, 1.0)
        img = img * (1 - lc) + cfg.lid * lc
    return np.log(img)


def render_events(traj, cfg):
    """Emit DVS events for a trajectory; returns a time-sorted event array.

    Events caused by the change from render k-1 to render k are stamped
    inside bin k, so binned frame k matches the trajectory sample k.
    """
    rng = np.random.default_rng(cfg.seed + 7919)
    C = cfg.contrast_threshold
    ref = render_log_intensity(cfg, traj.x[0], traj.y[0], traj.lid[0])
    pad = int(np.ceil(cfg.pupil_radius)) + 2
    chunks = []
    for k in range(1, len(traj)):
        px, py, pl = traj.x[k - 1], traj.y[k - 1], traj.lid[k - 1]
        cx, cy, cl = traj.x[k], traj.y[k], traj.lid[k]
        if px == cx and py == cy and pl == cl:
            continue
        rects = []
        xa = max(int(np.floor(min(px, cx))) - pad, 0)
        xb = min(int(np.ceil(max(px, cx))) + pad + 1, cfg.width)
        ya = max(int(np.floor(min(py, cy))) - pad, 0)
        yb = min(int(np.ceil(max(py, cy))) + pad + 1, cfg.height)
        rects.append((ya, yb, xa, xb))
        if pl != cl:
            la = max(int(np.floor(min(pl, cl))) - 1, 0)
            lb = min(int(np.ceil(max(pl, cl))) + 2, cfg.height)
            if lb > la:
                rects.append((la, lb, 0, cfg.width))
        for ya, yb, xa, xb in rects:
            if ya >= yb or xa >= xb:
                continue
            cur = render_log_intensity(cfg, cx, cy, cl, ya, yb, xa, xb)
            region = ref[ya:yb, xa:xb]
            delta = cur - region
            n = np.floor(np.abs(delta) / C).astype(np.int64)
            hit = n > 0
            if not hit.any():
                continue
            sign = np.sign(delta[hit]).astype(np.int64)
            region[hit] += sign * n[hit] * C
            iy, ix = np.nonzero(hit)
            counts = n[hit]
            rep = np.repeat(np.arange(counts.size), counts)
            order_in_px = np.arange(rep.size) - np.repeat(np.cumsum(counts) - counts, counts)
            phase = rng.random(counts.size)
            t_us = k * 1000 + np.floor((order_in_px + phase[rep]) * 1000.0 / counts[rep]).astype(np.int64)
            ev = np.empty(rep.size, dtype=EVENT_DTYPE)
            ev["t"] = t_us
            ev["x"] = ix[rep] + xa
            ev["y"] = iy[rep] + ya
            ev["p"] = sign[rep]
            chunks.append(ev)
    if not chunks:
        return np.empty(0, dtype=EVENT_DTYPE)
    events = np.concatenate(chunks)
    return events[np.argsort(events["t"], kind="stable")]


def generate_session(cfg):
    """(trajectory, events) for one synthetic recording."""
    traj = gen_trajectory(cfg)
    return traj, render_events(traj, cfg)


def write_session(directory, cfg, traj=None, events=None):
    """Write events.csv (sensor px) and 100 Hz labels.csv for one session."""
    if traj is None:
        traj, events = generate_session(cfg)
    os.makedirs(directory, exist_ok=True)
    write_events(os.path.join(directory, "events.csv"), events)
    write_labels(os.path.join(directory, "labels.csv"), traj.labels_100hz())
    with open(os.path.join(directory, "scene.txt"), "w") as fh:
        for k, v in asdict(cfg).items():
            fh.write(f"{k} = {v}\n")
    return traj, events


def to_session(traj, events, name="synthetic", duration_ms=None):
    """In-memory Session built the same way as loading the written CSVs."""
    from .events import Session, bin_events, interpolate_labels

    duration_ms = len(traj) if duration_ms is None else duration_ms
    frames = bin_events(events, duration_ms=duration_ms)
    labels = interpolate_labels(traj.labels_100hz(), 1000.0, duration_ms=duration_ms)
    return Session(name, frames, labels)


def write_dataset(root, n_sessions, cfg):
    """Sessions ``session_000 ...`` under ``root``; session i uses seed cfg.seed + i."""
    from dataclasses import replace

    out = []
    for i in range(n_sessions):
        scfg = replace(cfg, seed=cfg.seed + i)
        out.append(os.path.join(root, f"session_{i:03d}"))
        write_session(out[-1], scfg)
    return out
