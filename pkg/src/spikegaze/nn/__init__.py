"""Minimal differentiable layer library (numpy + numba)."""

from .layers import (
    avg_pool,
    avg_pool_backward,
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    dw_conv_backward,
    dw_conv_forward,
    instance_norm,
    instance_norm_backward,
    pw_conv_backward,
    pw_conv_forward,
    relu,
    relu_backward,
)
from .lif import LIFGrads, LIFLayer, LIFState, LIFTrace, lif_backward, lif_forward, lif_step, surrogate

__all__ = [
    "avg_pool", "avg_pool_backward", "conv_backward", "conv_forward", "dense_backward",
    "dense_forward", "dw_conv_backward", "dw_conv_forward", "instance_norm",
    "instance_norm_backward", "pw_conv_backward", "pw_conv_forward", "relu", "relu_backward",
    "LIFGrads", "LIFLayer", "LIFState", "LIFTrace", "lif_backward", "lif_forward", "lif_step",
    "surrogate",
]
