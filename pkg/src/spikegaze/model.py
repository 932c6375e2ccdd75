"""The N-parameterized DSC + LIF pupil-tracking network.

Three conv blocks (DW -> IN -> ReLU -> PW -> IN -> ReLU -> avg-pool), a
flatten to 2N features and three dense LIF layers (2N->256->64->2). The
last LIF layer does not spike; its membrane is the prediction, read as
normalized (x/80, y/60) coordinates.

An all-zero frame yields all-zero features (bias-free convs and IN of a
constant plane are exactly zero), so the front-end is skipped for empty
frames. This is exact, also for gradients: ReLU'(0) = 0 blocks every path.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import GRID_HEIGHT, GRID_WIDTH
from .nn import layers as L
from .nn.lif import LIFLayer, LIFState, lif_backward, lif_forward, lif_step

# (in_channels, out_channels or None for N, kernel, pool) per conv block
CONV_BLOCKS = ((2, 32, 7, 3), (32, 128, 5, 3), (128, None, 5, 4))
LIF_WIDTHS = (256, 64, 2)
FRAME_SHAPE = (2, GRID_HEIGHT, GRID_WIDTH)
COORD_SCALE = np.array([GRID_WIDTH, GRID_HEIGHT], dtype=np.float64)

_CHUNK = 32
_MIX_MAX_IN = 4     # pointwise layers this narrow use the fused mix kernel


@dataclass
class ModelConfig:
    n: int = 128
    use_dsc: bool = True
    seed: int = 0
    theta: float = 1.0
    surrogate_slope: float = 25.0
    output_spiking: bool = False
    random_mem_init: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if int(self.n) <= 0:
            raise ValueError(f"N must be positive, got {self.n}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def block_channels(self):
        return [(ci, self.n if co is None else co, k, p) for ci, co, k, p in CONV_BLOCKS]


def spatial_trace(height=GRID_HEIGHT, width=GRID_WIDTH):
    """(height, width) after each pooling stage, starting from the input."""
    dims = [(height, width)]
    for _, _, _, p in CONV_BLOCKS:
        height, width = height // p, width // p
        dims.append((height, width))
    return dims


def flatten_width(n):
    h, w = spatial_trace()[-1]
    return n * h * w


def tensor_shapes(config):
    """Ordered name -> shape map of every stored tensor."""
    shapes = {}
    for i, (ci, co, k, _) in enumerate(config.block_channels(), start=1):
        if config.use_dsc:
            shapes[f"conv{i}.dw"] = (ci, k, k)
            shapes[f"conv{i}.pw"] = (ci, co)
        else:
            shapes[f"conv{i}.w"] = (co, ci, k, k)
    n_in = flatten_width(config.n)
    for i, n_out in enumerate(LIF_WIDTHS, start=1):
        shapes[f"lif{i}.weight"] = (n_in, n_out)
        shapes[f"lif{i}.bias"] = (n_out,)
        shapes[f"lif{i}.beta"] = (n_out,)
        n_in = n_out
    return shapes


def trainable_names(config):
    return [name for name in tensor_shapes(config)
            if not (name.endswith(".beta") and name != "lif3.beta")]


def param_rows(config):
    """Per-row parameter counts in table order (fixed betas excluded)."""
    shapes = tensor_shapes(config)
    rows = []
    for i in range(1, 4):
        names = [f"conv{i}.dw", f"conv{i}.pw"] if config.use_dsc else [f"conv{i}.w"]
        rows.extend((name, int(np.prod(shapes[name]))) for name in names)
    for i in range(1, 4):
        count = int(np.prod(shapes[f"lif{i}.weight"])) + shapes[f"lif{i}.bias"][0]
        if i == 3:
            count += shapes["lif3.beta"][0]
        rows.append((f"lif{i}", count))
    return rows


def count_params(config):
    return sum(count for _, count in param_rows(config))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def lif_layers(self):
        """LIFLayer views sharing memory with ``tensors``."""
        cfg = self.config
        out = []
        for i in range(1, 4):
            last = i == 3
            out.append(LIFLayer(
                weight=self.tensors[f"lif{i}.weight"],
                bias=self.tensors[f"lif{i}.bias"],
                beta=self.tensors[f"lif{i}.beta"],
                beta_learnable=last,
                theta=cfg.theta,
                spiking=cfg.output_spiking if last else True,
                slope=cfg.surrogate_slope,
            ))
        return out

    def count(self):
        return sum(self.tensors[name].size for name in trainable_names(self.config))

    def copy(self):
        return ModelParams(ModelConfig(**asdict(self.config)),
                           {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class NetState:
    layers: list   # three LIFState

    def copy(self):
        return NetState([s.copy() for s in self.layers])


def zero_state(params, batch=1):
    return NetState([LIFState(np.zeros((batch, w), params.dtype), np.zeros((batch, w), params.dtype))
                     for w in LIF_WIDTHS])


def initial_state(params, batch=1, rng=None):
    """Fresh state; membranes are zero unless ``random_mem_init`` is set."""
    state = zero_state(params, batch)
    if params.config.random_mem_init:
        rng = rng if rng is not None else np.random.default_rng(params.config.seed + 1)
        for s in state.layers:
            s.mem[...] = rng.uniform(0.0, params.config.theta, size=s.mem.shape)
    return state


READOUT_BETA = 0.9


def build(config):
    """Initialize parameters and a zero state.

    He-uniform weights, zero biases, hidden betas ~ U(0.9, 1). The readout
    starts near the grid centre: its steady-state membrane is
    (x @ W + b) / (1 - beta), so b = 0.5 (1 - beta) and W is shrunk by
    (1 - beta) / sqrt(fan_in) relative to He scale.
    """
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    tensors = {}
    leak = 1.0 - READOUT_BETA
    for name, shape in tensor_shapes(config).items():
        if name == "lif3.bias":
            arr = np.full(shape, 0.5 * leak)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        elif name.endswith(".beta"):
            arr = np.full(shape, READOUT_BETA) if name == "lif3.beta" else rng.uniform(0.9, 1.0, size=shape)
        else:
            if name.endswith(".dw"):
                fan_in = shape[1] * shape[2]
            elif name.endswith(".pw") or name.endswith(".weight"):
                fan_in = shape[0]
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            if name == "lif3.weight":
                bound *= leak / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = arr.astype(dtype)
    params = ModelParams(config, tensors)
    return params, initial_state(params)


# ---------------------------------------------------------------- front-end

def _block_forward(params, i, x, keep, probe=None):
    cfg = params.config
    _, _, _, pool = cfg.block_channels()[i - 1]
    first = i == 1
    if cfg.use_dsc:
        if probe is not None:
            probe(f"conv{i}.dw", x)
        a = L.dw_conv_forward(x, params.tensors[f"conv{i}.dw"], sparse_input=first)
        y1, r1, inv1 = L.norm_relu(a)
        if probe is not None:
            probe(f"conv{i}.pw", r1)
        w = params.tensors[f"conv{i}.pw"]
        if w.shape[0] <= _MIX_MAX_IN:
            out, stats = L.pw_norm_relu_pool(r1, w, pool)
            cache = (x, y1, r1, inv1, stats) if keep else None
        else:
            y2, inv2, out = L.norm_relu_pool(L.pw_conv_forward(r1, w), pool, keep=keep)
            cache = (x, y1, r1, inv1, (y2, inv2)) if keep else None
    else:
        if probe is not None:
            probe(f"conv{i}.w", x)
        a = L.conv_forward(x, params.tensors[f"conv{i}.w"])
        y2, inv2, out = L.norm_relu_pool(a, pool, keep=keep)
        cache = (x, y2, inv2) if keep else None
    return out, cache


def _block_backward(params, i, cache, g_out, grads):
    cfg = params.config
    _, _, _, pool = cfg.block_channels()[i - 1]
    first = i == 1
    if cfg.use_dsc:
        x, y1, r1, inv1, stats = cache
        w = params.tensors[f"conv{i}.pw"]
        if w.shape[0] <= _MIX_MAX_IN:
            g, g_pw = L.pw_norm_relu_pool_backward(r1, w, pool, stats, g_out)
        else:
            y2, inv2 = stats
            g = L.norm_relu_pool_backward(g_out, y2, inv2, pool)
            g, g_pw = L.pw_conv_backward(r1, w, g)
        g = L.norm_relu_backward(g, y1, inv1)
        g_x, g_dw = L.dw_conv_backward(x, params.tensors[f"conv{i}.dw"], g,
                                       need_input_grad=not first, sparse_input=first)
        grads[f"conv{i}.pw"] += g_pw
        grads[f"conv{i}.dw"] += g_dw
    else:
        x, y2, inv2 = cache
        g = L.norm_relu_pool_backward(g_out, y2, inv2, pool)
        g_x, g_w = L.conv_backward(x, params.tensors[f"conv{i}.w"], g, need_input_grad=not first)
        grads[f"conv{i}.w"] += g_w
    return g_x


def _frontend_dense(params, frames, keep=False, probe=None):
    x = frames
    caches = []
    for i in range(1, 4):
        x, cache = _block_forward(params, i, x, keep, probe)
        caches.append(cache)
    return x.reshape(x.shape[0], -1), caches


def active_frames(frames):
    """Boolean mask of frames (leading axis) holding at least one event."""
    return frames.reshape(frames.shape[0], -1).any(axis=1)


def frontend_forward(params, frames, probe=None):
    """Conv features (B, 2N) for frames (B, 2, 60, 80); empty frames give zeros.

    ``probe(name, activation)``, if given, sees the input of every conv op
    of the non-empty frames.
    """
    frames = np.asarray(frames, dtype=params.dtype)
    B = frames.shape[0]
    feats = np.zeros((B, flatten_width(params.config.n)), params.dtype)
    idx = np.flatnonzero(active_frames(frames))
    for lo in range(0, idx.size, _CHUNK):
        sel = idx[lo:lo + _CHUNK]
        feats[sel], _ = _frontend_dense(params, np.ascontiguousarray(frames[sel]), probe=probe)
    return feats


def frontend_backward(params, frames, grad_feats, grads):
    """Accumulate conv-parameter gradients into ``grads`` (recomputes activations)."""
    frames = np.asarray(frames, dtype=params.dtype)
    mask = active_frames(frames) & grad_feats.any(axis=1)
    idx = np.flatnonzero(mask)
    n = params.config.n
    for lo in range(0, idx.size, _CHUNK):
        sel = idx[lo:lo + _CHUNK]
        out, caches = _frontend_dense(params, np.ascontiguousarray(frames[sel]), keep=True)
        g = grad_feats[sel].reshape(out.shape[0], n, *spatial_trace()[-1])
        for i in (3, 2, 1):
            g = _block_backward(params, i, caches[i - 1], g, grads)


# ---------------------------------------------------------------- full network

def forward_step(params, state, frame):
    """One 1 ms step. ``frame`` is (2, 60, 80) or (B, 2, 60, 80).

    Returns (prediction, new_state); prediction is the output membrane
    (normalized coordinates), shape (2,) or (B, 2).
    """
    single = np.ndim(frame) == 3
    frames = np.asarray(frame, dtype=params.dtype)
    if single:
        frames = frames[None]
    if frames.shape[1:] != FRAME_SHAPE:
        raise ValueError(f"frame shape {frames.shape[1:]} != {FRAME_SHAPE}")
    x = frontend_forward(params, frames)
    new_layers = []
    for layer, st in zip(params.lif_layers(), state.layers):
        x, st = lif_step(layer, st, x)
        new_layers.append(st)
    pred = new_layers[-1].mem
    return (pred[0].copy() if single else pred.copy()), NetState(new_layers)


@dataclass
class SequenceTrace:
    frames: np.ndarray       # (T*B, 2, 60, 80)
    feats: np.ndarray        # (T, B, 2N)
    lif: list                # LIFTrace per layer


def forward_sequence(params, state, window, keep_trace=True):
    """T successive forward steps with carried state.

    ``window`` is (T, 2, 60, 80) or (T, B, 2, 60, 80). Returns
    (predictions (T, [B,] 2), final_state, trace).
    """
    window = np.asarray(window, dtype=params.dtype)
    single = window.ndim == 4
    if single:
        window = window[:, None]
    T, B = window.shape[:2]
    if window.shape[2:] != FRAME_SHAPE:
        raise ValueError(f"frame shape {window.shape[2:]} != {FRAME_SHAPE}")
    flat = window.reshape(T * B, *FRAME_SHAPE)
    x = frontend_forward(params, flat).reshape(T, B, -1)
    feats = x
    lif_traces = []
    new_layers = []
    for layer, st in zip(params.lif_layers(), state.layers):
        x, mem, st, tr = lif_forward(layer, st, x)
        lif_traces.append(tr)
        new_layers.append(st)
    preds = mem[:, 0] if single else mem
    trace = SequenceTrace(flat, feats, lif_traces) if keep_trace else None
    return preds.copy(), NetState(new_layers), trace


def backward_sequence(params, trace, grad_pred):
    """Gradients of all trainable tensors given dL/d(prediction), shape (T, [B,] 2)."""
    grad_pred = np.asarray(grad_pred, dtype=params.dtype)
    if grad_pred.ndim == 2:
        grad_pred = grad_pred[:, None]
    grads = {name: np.zeros_like(params.tensors[name]) for name in trainable_names(params.config)}
    layers = params.lif_layers()
    g_spikes = None
    g_mem = grad_pred
    for i in (3, 2, 1):
        layer = layers[i - 1]
        # the loss reads the readout membrane even if that layer spikes
        lg = lif_backward(layer, trace.lif[i - 1], grad_spikes=g_spikes, grad_mem=g_mem)
        grads[f"lif{i}.weight"] += lg.weight
        grads[f"lif{i}.bias"] += lg.bias
        if layer.beta_learnable:
            grads[f"lif{i}.beta"] += lg.beta
        g_spikes, g_mem = lg.inputs, None
    T, B = trace.feats.shape[:2]
    frontend_backward(params, trace.frames, g_spikes.reshape(T * B, -1), grads)
    return grads


def to_pixels(pred):
    """Normalized membrane readout -> (x, y) in the 80 x 60 grid."""
    return np.asarray(pred, dtype=np.float64) * COORD_SCALE


def to_normalized(xy):
    return np.asarray(xy, dtype=np.float64) / COORD_SCALE


def conv_op_names(config):
    """Names of the conv ops in execution order (dw/pw pairs or single convs)."""
    if config.use_dsc:
        return [f"conv{i}.{k}" for i in range(1, 4) for k in ("dw", "pw")]
    return [f"conv{i}.w" for i in range(1, 4)]
