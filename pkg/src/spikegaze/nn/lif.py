"""Dense leaky integrate-and-fire layers with BPTT.

Recurrence per step (reset by subtraction, applied after the spike):

    I  = x @ W + b
    V  = beta * U_prev + I
    S  = [V > theta]            (spiking layers only)
    U  = V - theta * S

Non-spiking layers never emit and expose U as a continuous readout.
The backward pass treats S with a fast-sigmoid surrogate
dS/dV = 1 / (1 + slope * |V - theta|)**2 and detaches the reset term.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LIFLayer:
    weight: np.ndarray          # (in, out)
    bias: np.ndarray            # (out,)
    beta: np.ndarray            # (out,), decay factors in (0, 1]
    beta_learnable: bool = False
    theta: float = 1.0
    spiking: bool = True
    slope: float = 25.0

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ValueError("weight must be (in, out)")
        n_out = self.weight.shape[1]
        if self.bias.shape != (n_out,) or self.beta.shape != (n_out,):
            raise ValueError("bias and beta must have one entry per output neuron")
        if np.any(self.beta <= 0) or np.any(self.beta > 1):
            raise ValueError("beta must lie in (0, 1]")

    @property
    def n_in(self):
        return self.weight.shape[0]

    @property
    def n_out(self):
        return self.weight.shape[1]

    @property
    def n_params(self):
        n = self.weight.size + self.bias.size
        return n + self.beta.size if self.beta_learnable else n

    def clamp_beta(self):
        np.clip(self.beta, np.finfo(self.beta.dtype).tiny, 1.0, out=self.beta)


@dataclass
class LIFState:
    mem: np.ndarray       # (batch, out)
    spikes: np.ndarray    # (batch, out), last emitted spikes

    @classmethod
    def zeros(cls, layer, batch=1, dtype=None):
        dtype = dtype or layer.weight.dtype
        return cls(np.zeros((batch, layer.n_out), dtype), np.zeros((batch, layer.n_out), dtype))

    def copy(self):
        return LIFState(self.mem.copy(), self.spikes.copy())


@dataclass
class LIFTrace:
    inputs: np.ndarray     # (T, B, in)
    mem_prev: np.ndarray   # (T, B, out) membrane entering each step
    mem_pre: np.ndarray    # (T, B, out) V, before reset
    spikes: np.ndarray     # (T, B, out)
    mem: np.ndarray        # (T, B, out) U, after reset


@dataclass
class LIFGrads:
    weight: np.ndarray
    bias: np.ndarray
    beta: np.ndarray
    inputs: np.ndarray
    mem0: np.ndarray = field(default=None)


def surrogate(v, theta, slope):
    return 1.0 / (1.0 + slope * np.abs(v - theta)) ** 2


def _integrate(layer, mem, current, debug=False):
    v = layer.beta * mem + current
    if debug and not np.all(np.isfinite(v)):
        raise FloatingPointError("non-finite membrane potential")
    if layer.spiking:
        s = (v > layer.theta).astype(v.dtype)
        u = v - layer.theta * s
    else:
        s = np.zeros_like(v)
        u = v
    return v, s, u


def lif_step(layer, state, x, debug=False):
    """Advance one timestep. ``x`` is (batch, in); returns (spikes, new_state)."""
    if state.mem.shape[-1] != layer.n_out:
        raise ValueError("state width does not match layer")
    current = np.matmul(x, layer.weight) + layer.bias
    _, s, u = _integrate(layer, state.mem, current, debug)
    return s, LIFState(u, s)


def lif_forward(layer, state, xs, debug=False):
    """Run T steps over ``xs`` of shape (T, batch, in).

    Produces exactly the values of T successive ``lif_step`` calls.
    Returns (spikes, mem, final_state, trace), spikes/mem shaped (T, batch, out).
    """
    T = xs.shape[0]
    currents = np.matmul(xs, layer.weight) + layer.bias
    shape = currents.shape
    mem_prev = np.empty(shape, currents.dtype)
    mem_pre = np.empty(shape, currents.dtype)
    spikes = np.empty(shape, currents.dtype)
    mem = np.empty(shape, currents.dtype)
    u = state.mem
    s = state.spikes
    for t in range(T):
        mem_prev[t] = u
        v, s, u = _integrate(layer, u, currents[t], debug)
        mem_pre[t] = v
        spikes[t] = s
        mem[t] = u
    trace = LIFTrace(xs, mem_prev, mem_pre, spikes, mem)
    return spikes, mem, LIFState(u.copy(), s.copy()), trace


def lif_backward(layer, trace, grad_spikes=None, grad_mem=None):
    """BPTT through a recorded trace.

    ``grad_spikes`` and ``grad_mem`` are dL/dS_t and dL/dU_t, each (T, B, out)
    or None.
    """
    T, B, n_out = trace.mem.shape
    dtype = trace.mem.dtype
    g_cur = np.empty((T, B, n_out), dtype)
    g_beta = np.zeros(n_out, dtype)
    carry = np.zeros((B, n_out), dtype)
    use_spikes = layer.spiking and grad_spikes is not None
    for t in range(T - 1, -1, -1):
        g_v = carry.copy()
        if grad_mem is not None:
            g_v += grad_mem[t]
        if use_spikes:
            g_v += grad_spikes[t] * surrogate(trace.mem_pre[t], layer.theta, layer.slope)
        g_beta += np.sum(g_v * trace.mem_prev[t], axis=0)
        g_cur[t] = g_v
        carry = layer.beta * g_v
    flat_x = trace.inputs.reshape(T * B, -1)
    flat_g = g_cur.reshape(T * B, n_out)
    g_w = flat_x.T @ flat_g
    g_b = flat_g.sum(axis=0)
    g_x = np.matmul(g_cur, layer.weight.T)
    return LIFGrads(g_w, g_b, g_beta, g_x, carry)
