"""Stateless layers: forward, input-gradient and parameter-gradient routines.

Tensors are numpy arrays in (batch, channel, height, width) layout.
Convolutions carry no bias and use "same" zero padding.
"""

import numpy as np

from . import kernels


def _check4(x, name="x"):
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (batch, channel, height, width), got shape {x.shape}")


def dw_conv_forward(x, kernel, sparse_input=False):
    """Depthwise correlation, one k x k kernel per channel, output keeps H x W.

    ``sparse_input`` switches to a scatter loop that only visits nonzero
    inputs; the result is the same correlation (used for raw event counts).
    """
    _check4(x)
    if kernel.ndim != 3 or kernel.shape[0] != x.shape[1] or kernel.shape[1] != kernel.shape[2]:
        raise ValueError(f"kernel shape {kernel.shape} does not match {x.shape[1]} input channels")
    if kernel.shape[1] % 2 != 1:
        raise ValueError("kernel size must be odd for same padding")
    x = np.ascontiguousarray(x)
    kernel = np.ascontiguousarray(kernel, dtype=x.dtype)
    out = np.empty_like(x)
    if sparse_input:
        return kernels.dw_scatter_forward(x, kernel, out)
    return kernels.dw_gather_forward(x, kernel, out)


def dw_conv_backward(x, kernel, grad_out, need_input_grad=True, sparse_input=False):
    """Returns (grad_x or None, grad_kernel)."""
    x = np.ascontiguousarray(x)
    grad_out = np.ascontiguousarray(grad_out, dtype=x.dtype)
    kernel = np.ascontiguousarray(kernel, dtype=x.dtype)
    if grad_out.shape != x.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    gk = np.zeros_like(kernel)
    if sparse_input and not need_input_grad:
        kernels.dw_scatter_backward_weight(x, grad_out, gk)
        return None, gk
    gx = np.empty_like(x) if need_input_grad else np.empty((1, 1, 1, 1), x.dtype)
    kernels.dw_gather_backward(x, kernel, grad_out, gx, gk, need_input_grad)
    return (gx if need_input_grad else None), gk


def pw_conv_forward(x, weight):
    """1x1 convolution. ``weight`` has shape (C_in, C_out)."""
    _check4(x)
    B, C, H, W = x.shape
    if weight.ndim != 2 or weight.shape[0] != C:
        raise ValueError(f"weight shape {weight.shape} does not match {C} input channels")
    y = np.matmul(weight.T, x.reshape(B, C, H * W))
    return y.reshape(B, weight.shape[1], H, W)


def pw_conv_backward(x, weight, grad_out, need_input_grad=True):
    B, C, H, W = x.shape
    Co = weight.shape[1]
    xf = x.reshape(B, C, H * W)
    gf = grad_out.reshape(B, Co, H * W)
    gw = np.matmul(xf, gf.transpose(0, 2, 1)).sum(axis=0)
    gx = None
    if need_input_grad:
        gx = np.matmul(weight, gf).reshape(B, C, H, W)
    return gx, gw


def _im2col(x, k):
    B, C, H, W = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # (B, C, H, W, k, k) -> (B, C*k*k, H*W)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * k * k, H * W)


def conv_forward(x, weight):
    """Standard (dense) convolution, ``weight`` shape (C_out, C_in, k, k)."""
    _check4(x)
    Co, Ci, k, k2 = weight.shape
    B, C, H, W = x.shape
    if Ci != C or k != k2:
        raise ValueError(f"weight shape {weight.shape} does not match input {x.shape}")
    cols = _im2col(x, k)
    y = np.matmul(weight.reshape(Co, Ci * k * k), cols)
    return y.reshape(B, Co, H, W)


def conv_backward(x, weight, grad_out, need_input_grad=True):
    Co, Ci, k, _ = weight.shape
    B, C, H, W = x.shape
    cols = _im2col(x, k)
    gf = grad_out.reshape(B, Co, H * W)
    gw = np.tensordot(gf, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
    gx = None
    if need_input_grad:
        # correlation of the output gradient with the spatially flipped, transposed kernel
        flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = conv_forward(np.ascontiguousarray(grad_out), flipped)
    return gx, gw


def instance_norm(x, eps=1e-5):
    """Per-(sample, channel) normalization over space, no affine terms.

    Returns (y, inv_std); inv_std is what the backward pass needs.
    """
    _check4(x)
    B, C, H, W = x.shape
    xf = np.ascontiguousarray(x).reshape(B * C, H * W)
    y = np.empty_like(xf)
    inv_std = np.empty(B * C, dtype=xf.dtype)
    kernels.instance_norm_forward(xf, eps, y, inv_std)
    return y.reshape(B, C, H, W), inv_std


def instance_norm_backward(grad_out, y, inv_std):
    B, C, H, W = y.shape
    g = np.ascontiguousarray(grad_out, dtype=y.dtype).reshape(B * C, H * W)
    gx = np.empty_like(g)
    kernels.instance_norm_backward(g, y.reshape(B * C, H * W), inv_std, gx)
    return gx.reshape(B, C, H, W)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Gradient through ReLU given its input ``x`` (derivative 0 at x == 0)."""
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def avg_pool(x, k):
    """Non-overlapping k x k mean pool (stride k); ragged borders are dropped."""
    _check4(x)
    B, C, H, W = x.shape
    if k > H or k > W:
        raise ValueError(f"pool size {k} larger than input {H}x{W}")
    Ho, Wo = H // k, W // k
    acc = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            acc += x[:, :, di:Ho * k:k, dj:Wo * k:k]
    return acc * x.dtype.type(1.0 / (k * k))


def avg_pool_backward(grad_out, k, in_shape):
    B, C, H, W = in_shape
    Ho, Wo = grad_out.shape[2:]
    gx = np.zeros(in_shape, dtype=grad_out.dtype)
    share = grad_out * grad_out.dtype.type(1.0 / (k * k))
    for di in range(k):
        for dj in range(k):
            gx[:, :, di:Ho * k:k, dj:Wo * k:k] = share
    return gx


def norm_relu(x, eps=1e-5):
    """Fused instance_norm -> relu. Returns (y, relu(y), inv_std)."""
    _check4(x)
    B, C, H, W = x.shape
    xf = np.ascontiguousarray(x).reshape(B * C, H * W)
    y = np.empty_like(xf)
    r = np.empty_like(xf)
    inv_std = np.empty(B * C, dtype=xf.dtype)
    kernels.norm_relu_forward(xf, eps, y, r, inv_std)
    return y.reshape(x.shape), r.reshape(x.shape), inv_std


def norm_relu_backward(grad_out, y, inv_std):
    """Backward of ``norm_relu`` given dL/d relu(y)."""
    B, C, H, W = y.shape
    g = np.ascontiguousarray(grad_out, dtype=y.dtype).reshape(B * C, H * W)
    gx = np.empty_like(g)
    kernels.relu_norm_backward(g, y.reshape(B * C, H * W), inv_std, gx)
    return gx.reshape(y.shape)


def norm_relu_pool(x, k, eps=1e-5, keep=True):
    """Fused instance_norm -> relu -> avg_pool(k). Returns (y, inv_std, pooled).

    With ``keep=False`` the normalized tensor is not materialized and y is None.
    """
    _check4(x)
    B, C, H, W = x.shape
    if k > H or k > W:
        raise ValueError(f"pool size {k} larger than input {H}x{W}")
    xf = np.ascontiguousarray(x).reshape(B * C, H * W)
    y = np.empty_like(xf) if keep else np.empty((1, 1), dtype=xf.dtype)
    inv_std = np.empty(B * C, dtype=xf.dtype)
    out = np.empty((B * C, (H // k) * (W // k)), dtype=xf.dtype)
    kernels.norm_relu_pool_forward(xf, W, eps, k, xf.dtype.type(1.0 / (k * k)), y, inv_std, out, keep)
    return (y.reshape(x.shape) if keep else None), inv_std, out.reshape(B, C, H // k, W // k)


def norm_relu_pool_backward(grad_out, y, inv_std, k):
    B, C, H, W = y.shape
    gx = np.empty((B * C, H * W), dtype=y.dtype)
    g = np.ascontiguousarray(grad_out, dtype=y.dtype).reshape(B * C, -1)
    kernels.pool_relu_norm_backward(g, y.reshape(B * C, H * W), W, inv_std, k, y.dtype.type(1.0 / (k * k)), gx)
    return gx.reshape(y.shape)


def pw_norm_relu_pool(x, weight, k, eps=1e-5):
    """Fused pw_conv -> instance_norm -> relu -> avg_pool(k), for few input channels.

    Returns (pooled, (mean, inv_std)); the second item is the backward cache.
    """
    _check4(x)
    B, C, H, W = x.shape
    if weight.ndim != 2 or weight.shape[0] != C:
        raise ValueError(f"weight shape {weight.shape} does not match {C} input channels")
    if k > H or k > W:
        raise ValueError(f"pool size {k} larger than input {H}x{W}")
    Co = weight.shape[1]
    xf = np.ascontiguousarray(x).reshape(B, C, H * W)
    w = np.ascontiguousarray(weight, dtype=xf.dtype)
    mean = np.empty(B * Co, dtype=xf.dtype)
    inv_std = np.empty(B * Co, dtype=xf.dtype)
    out = np.empty((B, Co, (H // k) * (W // k)), dtype=xf.dtype)
    kernels.mix_norm_relu_pool_forward(xf, w, W, eps, k, xf.dtype.type(1.0 / (k * k)), mean, inv_std, out)
    return out.reshape(B, Co, H // k, W // k), (mean, inv_std)


def pw_norm_relu_pool_backward(x, weight, k, stats, grad_out):
    """Returns (grad_x, grad_weight) of ``pw_norm_relu_pool``."""
    B, C, H, W = x.shape
    Co = weight.shape[1]
    xf = np.ascontiguousarray(x).reshape(B, C, H * W)
    w = np.ascontiguousarray(weight, dtype=xf.dtype)
    g = np.ascontiguousarray(grad_out, dtype=xf.dtype).reshape(B, Co, -1)
    gx = np.zeros_like(xf)
    gw = np.zeros(w.shape, dtype=xf.dtype)
    mean, inv_std = stats
    kernels.mix_norm_relu_pool_backward(xf, w, W, k, xf.dtype.type(1.0 / (k * k)), mean, inv_std, g, gx, gw)
    return gx.reshape(x.shape), gw


def dense_forward(x, weight, bias):
    """Affine map ``x @ weight + bias`` over the last axis; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    return np.matmul(x, weight) + bias


def dense_backward(x, weight, grad_out):
    xf = x.reshape(-1, x.shape[-1])
    gf = grad_out.reshape(-1, grad_out.shape[-1])
    gw = xf.T @ gf
    gb = gf.sum(axis=0)
    gx = np.matmul(grad_out, weight.T)
    return gx, gw, gb
