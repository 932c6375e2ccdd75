"""Operation counting, activity-scaled sparse counts, energy/power and latency projection.

Counts are per inference step (one 1 ms frame). Each row carries one
``scale`` key naming the activity figure that multiplies it under sparse
execution:

* ``conv*.dw|pw|w`` rows: nonzero fraction of that op's input
* ``features``: nonzero fraction of the flattened conv features (LIF1 input)
* ``lif1`` / ``lif2``: firing rate of that layer (next layer's synapses,
  or the layer's own resets)
* ``frame``: fraction of frames holding events (norm, ReLU, pooling)
* ``None``: always paid (bias, decay + integrate, threshold compare)

FLOP conventions: ``mac2`` counts a MAC as 2 ops (multiply + add) and a
state update as 2; ``mac1`` counts both as a single fused op. Comparisons
and adds count 1 in both.
"""

import json
from dataclasses import asdict, dataclass, field, replace

from . import model as M

CONVENTIONS = ("mac2", "mac1")
LOAD_POLICIES = ("events", "synapses")


@dataclass
class LayerOps:
    name: str
    macs: int = 0
    adds: int = 0
    comparisons: int = 0
    state_updates: int = 0
    synaptic: bool = False   # macs are weight-fetching synaptic events
    scale: str = None
    inputs: int = 0          # input activations read by a synaptic row

    def flops(self, convention="mac2"):
        w = 2 if convention == "mac2" else 1
        if convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {convention!r}")
        return w * (self.macs + self.state_updates) + self.adds + self.comparisons

    def scaled(self, f):
        return replace(self, macs=self.macs * f, adds=self.adds * f, comparisons=self.comparisons * f,
                       state_updates=self.state_updates * f, inputs=self.inputs * f)


@dataclass
class OpCount:
    layers: list = field(default_factory=list)
    convention: str = "mac2"
    sparse: bool = False

    def total(self, attr):
        return sum(getattr(r, attr) for r in self.layers)

    @property
    def macs(self):
        return self.total("macs")

    @property
    def adds(self):
        return self.total("adds")

    @property
    def comparisons(self):
        return self.total("comparisons")

    @property
    def state_updates(self):
        return self.total("state_updates")

    @property
    def synaptic_macs(self):
        return sum(r.macs for r in self.layers if r.synaptic)

    @property
    def input_events(self):
        return self.total("inputs")

    def flops(self, convention=None):
        return sum(r.flops(convention or self.convention) for r in self.layers)

    def by_name(self):
        return {r.name: r for r in self.layers}


def _elementwise_rows(prefix, c, h, w, pool=None, tag=""):
    n = c * h * w
    rows = [
        # mean, centring (adds); variance accumulate, scale (multiplies)
        LayerOps(f"{prefix}.in{tag}", macs=2 * n, adds=2 * n, scale="frame"),
        LayerOps(f"{prefix}.relu{tag}", comparisons=n, scale="frame"),
    ]
    if pool:
        ho, wo = h // pool, w // pool
        rows.append(LayerOps(f"{prefix}.pool", adds=c * ho * wo * pool * pool, macs=c * ho * wo, scale="frame"))
    return rows


def count_dense_ops(config):
    """Per-step op counts of the full network, every unit active."""
    rows = []
    trace = M.spatial_trace()
    for i, (cin, cout, k, pool) in enumerate(config.block_channels(), start=1):
        h, w = trace[i - 1]
        hw = h * w
        if config.use_dsc:
            rows.append(LayerOps(f"conv{i}.dw", macs=cin * k * k * hw, synaptic=True, scale=f"conv{i}.dw",
                                 inputs=cin * hw))
            rows += _elementwise_rows(f"conv{i}", cin, h, w, tag="1")
            rows.append(LayerOps(f"conv{i}.pw", macs=cin * cout * hw, synaptic=True, scale=f"conv{i}.pw",
                                 inputs=cin * hw))
            rows += _elementwise_rows(f"conv{i}", cout, h, w, pool, tag="2")
        else:
            rows.append(LayerOps(f"conv{i}.w", macs=cin * cout * k * k * hw, synaptic=True, scale=f"conv{i}.w",
                                 inputs=cin * hw))
            rows += _elementwise_rows(f"conv{i}", cout, h, w, pool)
    widths = (M.flatten_width(config.n),) + M.LIF_WIDTHS
    pre_scale = "features"
    for i in range(1, 4):
        n_in, n_out = widths[i - 1], widths[i]
        spiking = config.output_spiking if i == 3 else True
        rows.append(LayerOps(f"lif{i}.syn", macs=n_in * n_out, synaptic=True, scale=pre_scale, inputs=n_in))
        rows.append(LayerOps(f"lif{i}.neuron", adds=n_out, state_updates=n_out,
                             comparisons=n_out if spiking else 0))
        if spiking:
            rows.append(LayerOps(f"lif{i}.reset", adds=n_out, scale=f"lif{i}"))
        pre_scale = f"lif{i}"
    return OpCount(rows)


def activity_factors(stats):
    """Flatten ActivityStats into the scale keys used by count rows."""
    f = {"frame": stats.frame_activity, "features": stats.feature_occupancy}
    f.update(stats.layer_occupancy)
    f.update(stats.firing_rates)
    return f


def count_sparse_ops(dense, stats):
    """Scale each row of ``dense`` by its activity factor from ``stats`` (ActivityStats or dict)."""
    if stats is None:
        raise ValueError("sparse counting needs activity statistics")
    factors = stats if isinstance(stats, dict) else activity_factors(stats)
    rows = []
    for r in dense.layers:
        if r.scale is None:
            rows.append(r)
            continue
        if r.scale not in factors:
            raise KeyError(f"activity statistics lack {r.scale!r}")
        f = float(factors[r.scale])
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"activity factor {r.scale}={f} outside [0, 1]")
        rows.append(r.scaled(f))
    return OpCount(rows, dense.convention, sparse=True)


# ---------------------------------------------------------------- energy

@dataclass
class EnergyModel:
    e_arith_pj: float = 1.4
    e_mem_pj: float = 3.7
    arith_convention: str = "mac1"     # fused MAC / state update counted as one arithmetic op
    load_policy: str = "events"        # or "synapses"
    loads_per_state_update: float = 1.0

    def __post_init__(self):
        if self.e_arith_pj <= 0 or self.e_mem_pj <= 0:
            raise ValueError("energy coefficients must be positive")
        if self.arith_convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {self.arith_convention!r}")
        if self.load_policy not in LOAD_POLICIES:
            raise ValueError(f"unknown load policy {self.load_policy!r}; choose from {LOAD_POLICIES}")

    def n_arith(self, ops):
        return ops.flops(self.arith_convention)

    def n_loads(self, ops):
        """Data loads per step.

        ``events``: one load per nonzero input activation reaching a synaptic
        layer (weights stay resident next to the accumulators).
        ``synapses``: one load per synaptic MAC (every weight fetched from
        data memory), an upper bound.
        Both add ``loads_per_state_update`` per neuron state update.
        """
        base = ops.input_events if self.load_policy == "events" else ops.synaptic_macs
        return base + self.loads_per_state_update * ops.state_updates

    def describe(self):
        what = ("nonzero input activation of each synaptic layer" if self.load_policy == "events"
                else "synaptic MAC (weight fetch)")
        return [
            f"{self.e_arith_pj} pJ per arithmetic op ({self.arith_convention} convention)",
            f"{self.e_mem_pj} pJ per data load",
            f"loads ({self.load_policy} policy) = 1 per {what}"
            f" + {self.loads_per_state_update} per neuron state update",
        ]


def energy_uj(n_arith, n_loads, e_arith_pj=1.4, e_mem_pj=3.7):
    return (e_arith_pj * n_arith + e_mem_pj * n_loads) * 1e-6


def project_power(ops, energy=None, f_hz=1000.0):
    """(energy per inference in uJ, power in mW at ``f_hz`` inferences per second)."""
    energy = EnergyModel() if energy is None else energy
    e = energy_uj(energy.n_arith(ops), energy.n_loads(ops), energy.e_arith_pj, energy.e_mem_pj)
    return e, e * f_hz * 1e-3


def project_latency(stages, f_hz=1000.0):
    """Pipelined latency in ms: one timestep per spiking stage.

    ``stages`` is a stage count or a ModelConfig (its three LIF layers).
    """
    if f_hz <= 0:
        raise ValueError("frequency must be positive")
    if isinstance(stages, M.ModelConfig):
        stages = len(M.LIF_WIDTHS)
    return 1000.0 * stages / f_hz


# ---------------------------------------------------------------- report

@dataclass
class CostReport:
    n: int
    use_dsc: bool
    params: int
    dense: OpCount
    sparse: OpCount
    energy: EnergyModel
    f_hz: float
    energy_uj: float
    power_mw: float
    latency_ms: float
    assumptions: list = field(default_factory=list)

    @property
    def dense_flops(self):
        return {c: self.dense.flops(c) for c in CONVENTIONS}

    @property
    def sparse_flops(self):
        return {c: self.sparse.flops(c) for c in CONVENTIONS}

    def summary(self):
        d, s = self.dense_flops, self.sparse_flops
        return {
            "n": self.n, "use_dsc": self.use_dsc, "params": self.params,
            "dense_flops_mac2": d["mac2"], "dense_flops_mac1": d["mac1"],
            "sparse_flops_mac2": s["mac2"], "sparse_flops_mac1": s["mac1"],
            "energy_uj": self.energy_uj, "power_mw": self.power_mw,
            "f_hz": self.f_hz, "latency_ms": self.latency_ms,
        }

    def to_text(self):
        lines = [f"cost report  N={self.n}  dsc={'yes' if self.use_dsc else 'no'}  params={self.params}", ""]
        lines.append(f"{'layer':<14}{'macs':>12}{'adds':>10}{'cmp':>8}{'upd':>7}"
                     f"{'sparse macs':>14}{'scale':>12}")
        sp = self.sparse.by_name()
        for r in self.dense.layers:
            lines.append(f"{r.name:<14}{r.macs:>12d}{r.adds:>10d}{r.comparisons:>8d}{r.state_updates:>7d}"
                         f"{sp[r.name].macs:>14.0f}{(r.scale or '-'):>12}")
        s = self.summary()
        lines += [
            "",
            f"dense FLOPs   mac2 {s['dense_flops_mac2']:,}   mac1 {s['dense_flops_mac1']:,}",
            f"sparse FLOPs  mac2 {s['sparse_flops_mac2']:,.0f}   mac1 {s['sparse_flops_mac1']:,.0f}",
            f"energy {s['energy_uj']:.3f} uJ/inference   power {s['power_mw']:.3f} mW @ {self.f_hz:g} Hz",
            f"latency {s['latency_ms']:.2f} ms",
            "",
            "assumptions:",
        ]
        lines += [f"  - {a}" for a in self.assumptions]
        return "\n".join(lines) + "\n"

    def csv_rows(self):
        """(header, rows) of the per-layer table with dense and sparse counts."""
        header = ["layer", "macs", "adds", "comparisons", "state_updates",
                  "sparse_macs", "sparse_adds", "sparse_comparisons", "scale"]
        sp = self.sparse.by_name()
        rows = []
        for r in self.dense.layers:
            q = sp[r.name]
            rows.append([r.name, r.macs, r.adds, r.comparisons, r.state_updates,
                         f"{q.macs:.1f}", f"{q.adds:.1f}", f"{q.comparisons:.1f}", r.scale or ""])
        return header, rows

    def to_jsonl(self):
        out = [json.dumps({"kind": "summary", **self.summary()})]
        for r in self.dense.layers:
            q = self.sparse.by_name()[r.name]
            out.append(json.dumps({"kind": "layer", **asdict(r),
                                   "sparse_macs": q.macs, "sparse_adds": q.adds}))
        out.append(json.dumps({"kind": "assumptions", "items": self.assumptions}))
        return "\n".join(out) + "\n"


PUBLISHED_FLOPS_NOTE = ("published FLOP figures (2.9-3.4M) are not reproduced by either convention from "
                        "the layer shapes; both are reported, nothing is tuned to match")


def cost_report(config, stats, energy=None, f_hz=1000.0):
    energy = EnergyModel() if energy is None else energy
    dense = count_dense_ops(config)
    sparse = count_sparse_ops(dense, stats)
    e, p = project_power(sparse, energy, f_hz)
    assumptions = [
        "counts are per 1 ms inference step; conv taps in the zero padding are counted",
        "sparse: conv MACs x nonzero fraction of the op input; LIF synapses x presynaptic rate;"
        " norm/ReLU/pool x fraction of non-empty frames; decay, bias and threshold unscaled;"
        " resets x own firing rate",
        "instance norm = 2 adds + 2 multiplies per element; ReLU = 1 comparison per element",
        f"{f_hz:g} Hz inference rate; power = energy x rate",
        *energy.describe(),
        "latency = one timestep per LIF stage (pipelined)",
        PUBLISHED_FLOPS_NOTE,
    ]
    if not isinstance(stats, dict):
        assumptions.append(f"activity measured over {stats.steps} streamed steps")
    return CostReport(config.n, config.use_dsc, M.count_params(config), dense, sparse, energy, f_hz,
                      e, p, project_latency(config, f_hz), assumptions)
