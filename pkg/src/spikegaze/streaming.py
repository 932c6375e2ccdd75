"""Tick-driven 1 kHz inference with persistent membranes and activity probes.

The engine owns one stream: events are pushed into the open 1 ms bin, and
``tick`` runs one network step on it. Membranes carry over between ticks
and are only cleared by ``reset``. A stream replayed through the engine
gives bitwise the same predictions as binning it offline and running
``forward_sequence`` from the same state.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import DOWNSAMPLE
from . import model as M
from .events import EVENT_DTYPE
from .nn.lif import lif_step


@dataclass
class ActivityStats:
    steps: int
    firing_rates: dict          # LIF layer -> spikes / neuron / step
    input_occupancy: float      # nonzero fraction of the 2 x 60 x 80 input, all steps
    layer_occupancy: dict       # conv op -> nonzero fraction of its input, all steps
    frame_activity: float       # fraction of steps with at least one event
    feature_occupancy: float    # nonzero fraction of the 2N flattened features

    def rate(self, layer):
        return self.firing_rates[layer]


@dataclass
class _Probes:
    steps: int = 0
    active: int = 0
    spikes: dict = field(default_factory=dict)
    nonzero: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)

    def see(self, name, arr):
        self.nonzero[name] = self.nonzero.get(name, 0) + int(np.count_nonzero(arr))
        self.sizes.setdefault(name, arr[0].size)


class StreamEngine:
    """Single-owner stateful engine. Calls on one engine must be serialized."""

    def __init__(self, params, state=None, bin_us=1000, scale=DOWNSAMPLE, probes=True):
        self.params = params
        self.bin_us = int(bin_us)
        self.scale = scale
        self.state = M.initial_state(params) if state is None else state.copy()
        self.frame = np.zeros(M.FRAME_SHAPE, dtype=params.dtype)
        self.clock = 0
        self.stale = 0
        self.enabled_probes = probes
        self._layers = params.lif_layers()
        self.reset_probes()

    # ---- ingestion

    def push_events(self, events):
        """Accumulate events of the open bin; earlier (stale) events are dropped and counted."""
        events = np.asarray(events)
        if events.size == 0:
            return
        b = np.asarray(events["t"], dtype=np.int64) // self.bin_us
        if np.any(b > self.clock):
            raise ValueError(f"event beyond open bin {self.clock}; call tick() first")
        ok = b == self.clock
        n_ok = int(np.count_nonzero(ok))
        self.stale += int(events.size - n_ok)
        if n_ok == 0:
            return
        ev = events if n_ok == events.size else events[ok]
        _, H, W = self.frame.shape
        x, y = ev["x"], ev["y"]
        if x.min() < 0 or y.min() < 0 or x.max() >= W * self.scale or y.max() >= H * self.scale:
            raise ValueError("event coordinates outside the sensor")
        flat = (np.asarray(ev["p"]) <= 0).astype(np.int64) * (H * W)
        flat += (y // self.scale).astype(np.int64) * W
        flat += x // self.scale
        # integer counts are exact in float, so this equals the offline binning
        idx, cnt = np.unique(flat, return_counts=True)
        self.frame.reshape(-1)[idx] += cnt

    # ---- stepping

    def tick(self):
        """Run one step on the open bin, clear it and advance the clock.

        Returns the prediction in grid pixels (x, y).
        """
        frame = self.frame[None]
        pr = self._probes if self.enabled_probes else None
        feats = M.frontend_forward(self.params, frame, probe=pr.see if pr else None)
        x = feats
        layers = []
        for i, (layer, st) in enumerate(zip(self._layers, self.state.layers)):
            x, st = lif_step(layer, st, x)
            layers.append(st)
            if pr is not None:
                pr.spikes[i] = pr.spikes.get(i, 0) + int(np.count_nonzero(x))
        self.state = M.NetState(layers)
        if pr is not None:
            pr.steps += 1
            pr.active += int(self.frame.any())
            pr.see("input", frame)
            pr.see("features", feats)
        self.frame[...] = 0
        self.clock += 1
        return M.to_pixels(layers[-1].mem[0])

    def reset(self):
        """Clear membranes, the open bin and the clock (the only reset path)."""
        self.state = M.initial_state(self.params)
        self.frame[...] = 0
        self.clock = 0
        self.stale = 0

    def reset_probes(self):
        self._probes = _Probes()

    def snapshot_activity(self):
        pr = self._probes
        if pr.steps == 0:
            raise RuntimeError("no steps observed since the last probe reset")
        rates = {}
        for i, layer in enumerate(self._layers):
            rates[f"lif{i + 1}"] = pr.spikes.get(i, 0) / (pr.steps * layer.n_out)
        occ = {name: pr.nonzero[name] / (pr.steps * pr.sizes[name])
               for name in pr.nonzero if name.startswith("conv")}
        for name in M.conv_op_names(self.params.config):
            occ.setdefault(name, 0.0)
        feat_occ = pr.nonzero.get("features", 0) / (pr.steps * M.flatten_width(self.params.config.n))
        return ActivityStats(pr.steps, rates, pr.nonzero.get("input", 0) / (pr.steps * self.frame.size),
                             occ, pr.active / pr.steps, feat_occ)

    # ---- drivers

    def run(self, events, n_ticks=None):
        """Replay a time-sorted event array as fast as possible; returns (n, 2) predictions."""
        events = np.asarray(events, dtype=EVENT_DTYPE)
        b = events["t"].astype(np.int64) // self.bin_us
        if n_ticks is None:
            n_ticks = int(b.max()) + 1 - self.clock if b.size else 0
        bounds = np.searchsorted(b, np.arange(self.clock, self.clock + n_ticks + 1))
        stale = bounds[0]
        self.stale += int(stale)
        out = np.empty((n_ticks, 2))
        for k in range(n_ticks):
            lo, hi = bounds[k], bounds[k + 1]
            if hi > lo:
                self.push_events(events[lo:hi])
            out[k] = self.tick()
        return out


def run_realtime(engine, events, n_ticks=None, period_s=1e-3, clock=time.perf_counter, sleep=time.sleep):
    """Pace ``engine`` to one tick per ``period_s``; yields (bin index, prediction).

    Events are fed by timestamp as if they arrived live. Ticks that finish
    late are not skipped; the driver just stops sleeping until it catches up.
    """
    events = np.asarray(events, dtype=EVENT_DTYPE)
    b = events["t"].astype(np.int64) // engine.bin_us
    if n_ticks is None:
        n_ticks = int(b.max()) + 1 - engine.clock if b.size else 0
    bounds = np.searchsorted(b, np.arange(engine.clock, engine.clock + n_ticks + 1))
    start = clock()
    for k in range(n_ticks):
        lo, hi = bounds[k], bounds[k + 1]
        if hi > lo:
            engine.push_events(events[lo:hi])
        k_bin = engine.clock
        pred = engine.tick()
        wait = start + (k + 1) * period_s - clock()
        if wait > 0:
            sleep(wait)
        yield k_bin, pred
