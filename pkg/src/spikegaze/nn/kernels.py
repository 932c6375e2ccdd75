"""Compiled inner loops for the layer library.

Every kernel processes one (sample, channel) plane at a time with a fixed
loop order, so a frame produces bit-identical output whether it is run alone
or inside a batch. The streaming engine relies on that.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def dw_gather_forward(x, w, out):
    B, C, H, W = x.shape
    k = w.shape[1]
    pad = k // 2
    Wp = W + 2 * pad
    Hp = H + 2 * pad
    L = H * Wp
    xp = np.zeros(Hp * Wp + k, x.dtype)
    acc = np.zeros(L, x.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(H):
                base = (i + pad) * Wp + pad
                for j in range(W):
                    xp[base + j] = x[b, c, i, j]
            acc[:] = 0
            for di in range(k):
                for dj in range(k):
                    wv = w[c, di, dj]
                    off = di * Wp + dj
                    s = xp[off:off + L]
                    for p in range(L):
                        acc[p] += wv * s[p]
            for i in range(H):
                for j in range(W):
                    out[b, c, i, j] = acc[i * Wp + j]
    return out


@njit(cache=True, fastmath=True)
def dw_gather_backward(x, w, g, gx, gw, need_gx):
    B, C, H, W = x.shape
    k = w.shape[1]
    pad = k // 2
    Wp = W + 2 * pad
    Hp = H + 2 * pad
    L = H * Wp
    xp = np.zeros(Hp * Wp + k, x.dtype)
    ge = np.zeros(L, x.dtype)
    gxp = np.zeros(Hp * Wp + k, x.dtype)
    for c in range(C):
        for b in range(B):
            for i in range(H):
                base = (i + pad) * Wp + pad
                for j in range(W):
                    xp[base + j] = x[b, c, i, j]
                    ge[i * Wp + j] = g[b, c, i, j]
            gxp[:] = 0
            for di in range(k):
                for dj in range(k):
                    off = di * Wp + dj
                    s = xp[off:off + L]
                    acc = ge[0] * 0
                    for p in range(L):
                        acc += ge[p] * s[p]
                    gw[c, di, dj] += acc
                    if need_gx:
                        wv = w[c, di, dj]
                        d = gxp[off:off + L]
                        for p in range(L):
                            d[p] += wv * ge[p]
            if need_gx:
                for i in range(H):
                    base = (i + pad) * Wp + pad
                    for j in range(W):
                        gx[b, c, i, j] = gxp[base + j]
    return gx, gw


@njit(cache=True, fastmath=True)
def dw_scatter_forward(x, w, out):
    # same correlation as dw_gather_forward, driven by nonzero inputs only
    B, C, H, W = x.shape
    k = w.shape[1]
    pad = k // 2
    Wp = W + 4 * pad
    Hp = H + 4 * pad
    acc = np.zeros(Hp * Wp, x.dtype)
    for b in range(B):
        for c in range(C):
            acc[:] = 0
            touched = False
            for u in range(H):
                for v in range(W):
                    val = x[b, c, u, v]
                    if val != 0:
                        touched = True
                        for di in range(k):
                            base = (u - di + 2 * pad) * Wp + v + 2 * pad
                            for dj in range(k):
                                acc[base - dj] += w[c, di, dj] * val
            if touched:
                for i in range(H):
                    base = (i + pad) * Wp + pad
                    for j in range(W):
                        out[b, c, i, j] = acc[base + j]
            else:
                for i in range(H):
                    for j in range(W):
                        out[b, c, i, j] = 0
    return out


@njit(cache=True, fastmath=True)
def dw_scatter_backward_weight(x, g, gw):
    B, C, H, W = x.shape
    k = gw.shape[1]
    pad = k // 2
    Wp = W + 4 * pad
    Hp = H + 4 * pad
    gp = np.zeros(Hp * Wp, x.dtype)
    for b in range(B):
        for c in range(C):
            loaded = False
            for u in range(H):
                for v in range(W):
                    val = x[b, c, u, v]
                    if val != 0:
                        if not loaded:
                            gp[:] = 0
                            for i in range(H):
                                base = (i + pad) * Wp + pad
                                for j in range(W):
                                    gp[base + j] = g[b, c, i, j]
                            loaded = True
                        for di in range(k):
                            base = (u - di + 2 * pad) * Wp + v + 2 * pad
                            for dj in range(k):
                                gw[c, di, dj] += val * gp[base - dj]
    return gw


@njit(cache=True)
def instance_norm_forward(x, eps, y, inv_std):
    R, P = x.shape
    for r in range(R):
        s = 0.0
        for p in range(P):
            s += x[r, p]
        m = s / P
        v = 0.0
        for p in range(P):
            d = x[r, p] - m
            v += d * d
        inv = 1.0 / np.sqrt(v / P + eps)
        inv_std[r] = inv
        for p in range(P):
            y[r, p] = (x[r, p] - m) * inv
    return y, inv_std


@njit(cache=True)
def instance_norm_backward(g, y, inv_std, gx):
    R, P = g.shape
    for r in range(R):
        sg = 0.0
        sgy = 0.0
        for p in range(P):
            sg += g[r, p]
            sgy += g[r, p] * y[r, p]
        mg = sg / P
        mgy = sgy / P
        inv = inv_std[r]
        for p in range(P):
            gx[r, p] = inv * (g[r, p] - mg - y[r, p] * mgy)
    return gx


# Fused elementwise chains, one (H*W) plane at a time so each plane stays
# in cache. ``zero`` literals are typed from the data so float32 loops stay
# float32 and vectorize.

@njit(cache=True, fastmath=True)
def _plane_stats(xs, P):
    s = 0.0
    for p in range(P):
        s += xs[p]
    m = s / P
    v = 0.0
    for p in range(P):
        d = xs[p] - m
        v += d * d
    return m, v / P


@njit(cache=True, fastmath=True)
def norm_relu_forward(x, eps, y, r, inv_std):
    R, P = x.shape
    for q in range(R):
        xs = x[q]
        ys = y[q]
        rs = r[q]
        m, v = _plane_stats(xs, P)
        inv = 1.0 / np.sqrt(v + eps)
        inv_std[q] = inv
        mf = xs[0] * 0 + m
        invf = xs[0] * 0 + inv
        zero = xs[0] * 0
        for p in range(P):
            yy = (xs[p] - mf) * invf
            ys[p] = yy
            rs[p] = max(yy, zero)
    return y


@njit(cache=True, fastmath=True)
def _pool_rows(src, W, k, scale, v, dst):
    """dst[i, j] = scale * sum of the k x k block of the (rows, W) plane ``src``."""
    Wo = W // k
    Ho = dst.size // Wo
    for i in range(Ho):
        v[:] = 0
        for di in range(k):
            row = src[(i * k + di) * W:(i * k + di + 1) * W]
            for j in range(W):
                v[j] += row[j]
        for j in range(Wo):
            acc = v[j * k]
            for dj in range(1, k):
                acc += v[j * k + dj]
            dst[i * Wo + j] = acc * scale


SMALL_PLANE = 256


@njit(cache=True, fastmath=True)
def _norm_relu_pool_small(x, W, eps, k, scale, y, inv_std, out, store_y):
    """Tiny-plane variant: flat 2D indexing and direct block sums, no per-plane views.

    Per-element arithmetic matches the general path; only the pooling sum order differs.
    """
    R, P = x.shape
    r = np.empty(P, x.dtype)
    Wo = W // k
    Ho = out.shape[1] // Wo
    for q in range(R):
        s = 0.0
        for p in range(P):
            s += x[q, p]
        m = s / P
        v = 0.0
        for p in range(P):
            d = x[q, p] - m
            v += d * d
        inv = 1.0 / np.sqrt(v / P + eps)
        inv_std[q] = inv
        for p in range(P):
            yy = (x[q, p] - m) * inv
            if store_y:
                y[q, p] = yy
            r[p] = max(yy, 0.0)
        for i in range(Ho):
            for j in range(Wo):
                acc = r[0] * 0
                for di in range(k):
                    base = (i * k + di) * W + j * k
                    for dj in range(k):
                        acc += r[base + dj]
                out[q, i * Wo + j] = acc * scale
    return out


@njit(cache=True, fastmath=True)
def norm_relu_pool_forward(x, W, eps, k, scale, y, inv_std, out, store_y):
    """x, y: (R, H*W) planes; out: (R, Ho*Wo) pooled relu(y). y is written only if store_y."""
    R, P = x.shape
    if P <= SMALL_PLANE:
        return _norm_relu_pool_small(x, W, eps, k, scale, y, inv_std, out, store_y)
    v = np.empty(W, x.dtype)
    r = np.empty(P, x.dtype)
    for q in range(R):
        xs = x[q]
        m, var = _plane_stats(xs, P)
        inv = 1.0 / np.sqrt(var + eps)
        inv_std[q] = inv
        mf = xs[0] * 0 + m
        invf = xs[0] * 0 + inv
        zero = xs[0] * 0
        if store_y:
            ys = y[q]
            for p in range(P):
                yy = (xs[p] - mf) * invf
                ys[p] = yy
                r[p] = max(yy, zero)
        else:
            for p in range(P):
                r[p] = max((xs[p] - mf) * invf, zero)
        _pool_rows(r, W, k, scale, v, out[q])
    return out


@njit(cache=True, fastmath=True)
def relu_norm_backward(g, y, inv_std, gx):
    R, P = g.shape
    for q in range(R):
        gs = g[q]
        ys = y[q]
        gxs = gx[q]
        zero = gs[0] * 0
        for p in range(P):
            gxs[p] = gs[p] if ys[p] > zero else zero
        _norm_backward_plane(gxs, ys, inv_std[q], P)
    return gx


@njit(cache=True, fastmath=True)
def _norm_backward_plane(gs, ys, inv, P):
    sg = 0.0
    sgy = 0.0
    for p in range(P):
        sg += gs[p]
        sgy += gs[p] * ys[p]
    mg = gs[0] * 0 + sg / P
    mgy = gs[0] * 0 + sgy / P
    invf = gs[0] * 0 + inv
    for p in range(P):
        gs[p] = invf * (gs[p] - mg - ys[p] * mgy)


@njit(cache=True, fastmath=True)
def _unpool_relu(go, ys, W, k, scale, grow, gs):
    """gs = relu'(ys) * (go expanded over k x k blocks) * scale; ragged border gets 0."""
    Wo = W // k
    Ho = go.size // Wo
    zero = gs[0] * 0
    gs[:] = 0
    for io in range(Ho):
        for jo in range(Wo):
            val = go[io * Wo + jo] * scale
            for dj in range(k):
                grow[jo * k + dj] = val
        for di in range(k):
            r0 = (io * k + di) * W
            for j in range(W):
                gs[r0 + j] = grow[j] if ys[r0 + j] > zero else zero


@njit(cache=True, fastmath=True)
def pool_relu_norm_backward(g_out, y, W, inv_std, k, scale, gx):
    """g_out: (R, Ho*Wo); y, gx: (R, H*W)."""
    R, P = y.shape
    grow = np.zeros(W, y.dtype)
    for q in range(R):
        _unpool_relu(g_out[q], y[q], W, k, scale, grow, gx[q])
        _norm_backward_plane(gx[q], y[q], inv_std[q], P)
    return gx


# Pointwise conv -> instance norm -> relu -> avg pool for inputs with few
# channels. Each output plane is a linear mix of the input planes, so its
# mean and variance follow from the input means and covariance; the
# C_out x H x W pre-activation tensor is never stored.

@njit(cache=True, fastmath=True)
def _mix_stats(xb, w, eps, mean, inv_std, base):
    Cin, P = xb.shape
    Co = w.shape[1]
    mu = np.zeros(Cin)
    cov = np.zeros((Cin, Cin))
    for i in range(Cin):
        s = 0.0
        xi = xb[i]
        for p in range(P):
            s += xi[p]
        mu[i] = s / P
    for i in range(Cin):
        xi = xb[i]
        for j in range(i + 1):
            xj = xb[j]
            s = 0.0
            for p in range(P):
                s += (xi[p] - mu[i]) * (xj[p] - mu[j])
            cov[i, j] = s / P
            cov[j, i] = s / P
    for c in range(Co):
        m = 0.0
        v = 0.0
        for i in range(Cin):
            m += w[i, c] * mu[i]
            for j in range(Cin):
                v += w[i, c] * w[j, c] * cov[i, j]
        if v < 0.0:
            v = 0.0
        mean[base + c] = m
        inv_std[base + c] = 1.0 / np.sqrt(v + eps)


@njit(cache=True, fastmath=True)
def mix_norm_relu_pool_forward(x, w, W, eps, k, scale, mean, inv_std, out):
    """x: (B, Cin, H*W); w: (Cin, Co); out: (B, Co, Ho*Wo)."""
    B, Cin, P = x.shape
    Co = w.shape[1]
    t = np.empty(P, x.dtype)
    v = np.empty(W, x.dtype)
    coef = np.empty(Cin, x.dtype)
    zero = scale * 0
    for b in range(B):
        xb = x[b]
        _mix_stats(xb, w, eps, mean, inv_std, b * Co)
        for c in range(Co):
            inv = inv_std[b * Co + c]
            off = -mean[b * Co + c] * inv
            for i in range(Cin):
                coef[i] = w[i, c] * inv
            if Cin == 2:
                a0 = coef[0]
                a1 = coef[1]
                x0 = xb[0]
                x1 = xb[1]
                for p in range(P):
                    t[p] = max(off + a0 * x0[p] + a1 * x1[p], zero)
            else:
                for p in range(P):
                    t[p] = off
                for ci in range(Cin):
                    a = coef[ci]
                    xi = xb[ci]
                    for p in range(P):
                        t[p] += a * xi[p]
                for p in range(P):
                    t[p] = max(t[p], zero)
            _pool_rows(t, W, k, scale, v, out[b, c])
    return out


@njit(cache=True, fastmath=True)
def mix_norm_relu_pool_backward(x, w, W, k, scale, mean, inv_std, g_out, gx, gw):
    """Accumulates into gx (B, Cin, H*W) and gw (Cin, Co)."""
    B, Cin, P = x.shape
    Co = w.shape[1]
    y = np.empty(P, x.dtype)
    g = np.empty(P, x.dtype)
    grow = np.zeros(W, x.dtype)
    coef = np.empty(Cin, x.dtype)
    for b in range(B):
        xb = x[b]
        for c in range(Co):
            inv = inv_std[b * Co + c]
            off = -mean[b * Co + c] * inv
            for i in range(Cin):
                coef[i] = w[i, c] * inv
            if Cin == 2:
                a0 = coef[0]
                a1 = coef[1]
                x0 = xb[0]
                x1 = xb[1]
                for p in range(P):
                    y[p] = off + a0 * x0[p] + a1 * x1[p]
            else:
                y[:] = off
                for ci in range(Cin):
                    a = coef[ci]
                    xi = xb[ci]
                    for p in range(P):
                        y[p] += a * xi[p]
            _unpool_relu(g_out[b, c], y, W, k, scale, grow, g)
            sg = 0.0
            sgy = 0.0
            for p in range(P):
                sg += g[p]
                sgy += g[p] * y[p]
            mg = inv * 0 + sg / P
            mgy = inv * 0 + sgy / P
            if Cin == 2:
                x0 = xb[0]
                x1 = xb[1]
                g0 = gx[b, 0]
                g1 = gx[b, 1]
                w0 = w[0, c]
                w1 = w[1, c]
                s0 = 0.0
                s1 = 0.0
                for p in range(P):
                    gp = inv * (g[p] - mg - y[p] * mgy)
                    s0 += x0[p] * gp
                    s1 += x1[p] * gp
                    g0[p] += w0 * gp
                    g1[p] += w1 * gp
                gw[0, c] += s0
                gw[1, c] += s1
            else:
                for p in range(P):
                    g[p] = inv * (g[p] - mg - y[p] * mgy)
                for ci in range(Cin):
                    xi = xb[ci]
                    gxi = gx[b, ci]
                    wc = w[ci, c]
                    s = 0.0
                    for p in range(P):
                        s += xi[p] * g[p]
                        gxi[p] += wc * g[p]
                    gw[ci, c] += s
    return gx
