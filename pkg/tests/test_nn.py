import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from spikegaze.nn import layers as L
from spikegaze.nn.lif import LIFLayer, LIFState, lif_backward, lif_forward, lif_step


def fd_grad(f, x, h=1e-6):
    """Central finite differences of scalar f with respect to array x (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


SHAPES = [(1, 1, 5, 5), (2, 3, 6, 7), (1, 2, 9, 8), (3, 1, 4, 6), (2, 2, 7, 5)]


# ---------------------------------------------------------------- oracles

@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("k", [3, 5])
@pytest.mark.parametrize("sparse", [False, True])
def test_dw_conv_matches_loops(shape, k, sparse):
    rng = np.random.default_rng(hash((shape, k)) % 2**32)
    x = rng.normal(size=shape)
    if sparse:
        x[rng.random(shape) < 0.8] = 0
    ker = rng.normal(size=(shape[1], k, k))
    np.testing.assert_allclose(L.dw_conv_forward(x, ker, sparse_input=sparse), oracles.dw_conv(x, ker), atol=1e-12)


@pytest.mark.parametrize("shape", SHAPES)
def test_pw_conv_matches_loops(shape):
    rng = np.random.default_rng(1)
    x = rng.normal(size=shape)
    w = rng.normal(size=(shape[1], 4))
    np.testing.assert_allclose(L.pw_conv_forward(x, w), oracles.pw_conv(x, w), atol=1e-12)


@pytest.mark.parametrize("shape", SHAPES[:3])
def test_dense_conv_matches_loops(shape):
    rng = np.random.default_rng(2)
    x = rng.normal(size=shape)
    w = rng.normal(size=(3, shape[1], 3, 3))
    np.testing.assert_allclose(L.conv_forward(x, w), oracles.conv(x, w), atol=1e-12)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_pool_matches_loops(k):
    x = np.random.default_rng(k).normal(size=(2, 3, 9, 13))
    np.testing.assert_allclose(L.avg_pool(x, k), oracles.avg_pool(x, k), atol=1e-12)


@pytest.mark.parametrize("shape", SHAPES)
def test_instance_norm_matches_loops(shape):
    x = np.random.default_rng(3).normal(2.0, 3.0, size=shape)
    y, _ = L.instance_norm(x)
    np.testing.assert_allclose(y, oracles.instance_norm(x), atol=1e-9)


def test_instance_norm_constant_plane_is_zero():
    y, _ = L.instance_norm(np.full((1, 2, 4, 4), 7.0))
    assert np.all(y == 0)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k", [3, 4])
def test_fused_norm_relu_pool_matches_composition(dtype, k):
    x = np.random.default_rng(4).normal(size=(2, 3, 12, 16)).astype(dtype)
    y, inv, pooled = L.norm_relu_pool(x, k)
    y2, inv2 = L.instance_norm(x)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(y, y2, atol=tol)
    np.testing.assert_allclose(pooled, L.avg_pool(L.relu(y2), k), atol=tol)
    _, _, pooled_nokeep = L.norm_relu_pool(x, k, keep=False)
    np.testing.assert_array_equal(pooled, pooled_nokeep)


@pytest.mark.parametrize("cin", [1, 2, 3, 4])
def test_fused_pw_norm_relu_pool_matches_composition(cin):
    rng = np.random.default_rng(cin)
    x = rng.normal(size=(2, cin, 12, 15))
    w = rng.normal(size=(cin, 5))
    out, _ = L.pw_norm_relu_pool(x, w, 3)
    ref = oracles.avg_pool(np.maximum(oracles.instance_norm(oracles.pw_conv(x, w)), 0), 3)
    np.testing.assert_allclose(out, ref, atol=1e-9)


def test_lif_matches_scalar_loop():
    rng = np.random.default_rng(5)
    w = rng.normal(0, 0.8, size=(4, 3))
    b = rng.normal(0, 0.2, size=3)
    beta = rng.uniform(0.8, 1.0, size=3)
    xs = rng.random((12, 2, 4))
    layer = LIFLayer(w, b, beta)
    S, U, _, _ = lif_forward(layer, LIFState.zeros(layer, 2), xs)
    S_ref, U_ref = oracles.lif_run(w, b, beta, xs)
    np.testing.assert_array_equal(S, S_ref)
    np.testing.assert_allclose(U, U_ref, atol=1e-12)
    assert S.sum() > 0


def test_lif_forward_equals_repeated_steps():
    rng = np.random.default_rng(6)
    layer = LIFLayer(rng.normal(size=(5, 4)).astype(np.float32), np.zeros(4, np.float32),
                     np.full(4, 0.95, np.float32))
    xs = (rng.random((20, 3, 5)) < 0.3).astype(np.float32)
    S, U, final, _ = lif_forward(layer, LIFState.zeros(layer, 3), xs)
    state = LIFState.zeros(layer, 3)
    for t in range(20):
        s, state = lif_step(layer, state, xs[t])
        assert np.array_equal(s, S[t]) and np.array_equal(state.mem, U[t])
    assert np.array_equal(final.mem, state.mem)


def test_lif_reset_by_subtraction():
    layer = LIFLayer(np.array([[1.0]]), np.zeros(1), np.array([1.0]))
    s, st_ = lif_step(layer, LIFState.zeros(layer), np.array([[2.5]]))
    assert s[0, 0] == 1 and st_.mem[0, 0] == pytest.approx(1.5)


def test_lif_rejects_bad_beta():
    with pytest.raises(ValueError):
        LIFLayer(np.ones((2, 2)), np.zeros(2), np.array([0.5, 1.2]))


# ---------------------------------------------------------------- gradients

def _check(analytic, f, x, tol=1e-4):
    num = fd_grad(f, x)
    assert rel_err(analytic, num) <= tol, rel_err(analytic, num)


@pytest.mark.parametrize("shape", SHAPES)
def test_dw_conv_grad(shape):
    rng = np.random.default_rng(10)
    x = rng.normal(size=shape)
    k = rng.normal(size=(shape[1], 3, 3))
    R = rng.normal(size=shape)
    gx, gk = L.dw_conv_backward(x, k, R)
    _check(gx, lambda: np.sum(L.dw_conv_forward(x, k) * R), x)
    _check(gk, lambda: np.sum(L.dw_conv_forward(x, k) * R), k)


def test_dw_conv_sparse_weight_grad():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 2, 8, 9)) * (rng.random((2, 2, 8, 9)) < 0.3)
    k = rng.normal(size=(2, 5, 5))
    R = rng.normal(size=x.shape)
    _, gk = L.dw_conv_backward(x, k, R, need_input_grad=False, sparse_input=True)
    _check(gk, lambda: np.sum(L.dw_conv_forward(x, k, sparse_input=True) * R), k)


@pytest.mark.parametrize("shape", SHAPES)
def test_pw_conv_grad(shape):
    rng = np.random.default_rng(12)
    x = rng.normal(size=shape)
    w = rng.normal(size=(shape[1], 3))
    R = rng.normal(size=(shape[0], 3) + shape[2:])
    gx, gw = L.pw_conv_backward(x, w, R)
    _check(gx, lambda: np.sum(L.pw_conv_forward(x, w) * R), x)
    _check(gw, lambda: np.sum(L.pw_conv_forward(x, w) * R), w)


@pytest.mark.parametrize("shape", SHAPES[:3])
def test_dense_conv_grad(shape):
    rng = np.random.default_rng(13)
    x = rng.normal(size=shape)
    w = rng.normal(size=(2, shape[1], 3, 3))
    R = rng.normal(size=(shape[0], 2) + shape[2:])
    gx, gw = L.conv_backward(x, w, R)
    _check(gx, lambda: np.sum(L.conv_forward(x, w) * R), x)
    _check(gw, lambda: np.sum(L.conv_forward(x, w) * R), w)


@pytest.mark.parametrize("shape", SHAPES)
def test_instance_norm_grad(shape):
    rng = np.random.default_rng(14)
    x = rng.normal(size=shape)
    R = rng.normal(size=shape)
    y, inv = L.instance_norm(x)
    _check(L.instance_norm_backward(R, y, inv), lambda: np.sum(L.instance_norm(x)[0] * R), x)


@pytest.mark.parametrize("k", [2, 3])
def test_pool_grad(k):
    rng = np.random.default_rng(15)
    x = rng.normal(size=(2, 2, 7, 8))
    R = rng.normal(size=(2, 2, 7 // k, 8 // k))
    _check(L.avg_pool_backward(R, k, x.shape), lambda: np.sum(L.avg_pool(x, k) * R), x)


def test_relu_grad():
    rng = np.random.default_rng(16)
    x = rng.normal(size=(2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5   # keep away from the kink
    R = rng.normal(size=x.shape)
    _check(L.relu_backward(x, R), lambda: np.sum(L.relu(x) * R), x)


@pytest.mark.parametrize("shape", SHAPES)
def test_norm_relu_grad(shape):
    rng = np.random.default_rng(17)
    x = rng.normal(size=shape)
    R = rng.normal(size=shape)
    y, _, inv = L.norm_relu(x)
    _check(L.norm_relu_backward(R, y, inv), lambda: np.sum(L.norm_relu(x)[1] * R), x)


@pytest.mark.parametrize("shape,k", [((2, 3, 9, 12), 3), ((1, 2, 8, 8), 4), ((2, 1, 10, 7), 2)])
def test_norm_relu_pool_grad(shape, k):
    rng = np.random.default_rng(18)
    x = rng.normal(size=shape)
    y, inv, out = L.norm_relu_pool(x, k)
    R = rng.normal(size=out.shape)
    _check(L.norm_relu_pool_backward(R, y, inv, k), lambda: np.sum(L.norm_relu_pool(x, k)[2] * R), x)


@pytest.mark.parametrize("cin", [1, 2, 3, 4])
def test_pw_norm_relu_pool_grad(cin):
    rng = np.random.default_rng(19 + cin)
    x = rng.normal(size=(2, cin, 9, 12))
    w = rng.normal(size=(cin, 3))
    out, stats = L.pw_norm_relu_pool(x, w, 3)
    R = rng.normal(size=out.shape)
    gx, gw = L.pw_norm_relu_pool_backward(x, w, 3, stats, R)
    f = lambda: np.sum(L.pw_norm_relu_pool(x, w, 3)[0] * R)  # noqa: E731
    _check(gx, f, x)
    _check(gw, f, w)


def test_dense_grad():
    rng = np.random.default_rng(23)
    x = rng.normal(size=(3, 4, 5))
    w = rng.normal(size=(5, 2))
    b = rng.normal(size=2)
    R = rng.normal(size=(3, 4, 2))
    gx, gw, gb = L.dense_backward(x, w, R)
    f = lambda: np.sum(L.dense_forward(x, w, b) * R)  # noqa: E731
    _check(gx, f, x)
    _check(gw, f, w)
    _check(gb, f, b)


@pytest.mark.parametrize("spiking", [True, False])
@pytest.mark.parametrize("T,B", [(6, 1), (9, 3)])
def test_lif_grad_subthreshold(spiking, T, B):
    """Below threshold the spike path is silent, so BPTT must be exact."""
    rng = np.random.default_rng(T * 10 + B)
    w = rng.normal(0, 0.05, size=(4, 3))
    b = rng.normal(0, 0.01, size=3)
    beta = rng.uniform(0.8, 0.99, size=3)
    xs = rng.random((T, B, 4))
    R = rng.normal(size=(T, B, 3))

    def f():
        layer = LIFLayer(w, b, beta, beta_learnable=True, theta=100.0, spiking=spiking)
        _, U, _, _ = lif_forward(layer, LIFState.zeros(layer, B), xs)
        return np.sum(U * R)

    layer = LIFLayer(w, b, beta, beta_learnable=True, theta=100.0, spiking=spiking)
    _, U, _, tr = lif_forward(layer, LIFState.zeros(layer, B), xs)
    assert np.all(tr.mem_pre < 100.0)
    g = lif_backward(layer, tr, grad_mem=R)
    _check(g.weight, f, w)
    _check(g.bias, f, b)
    _check(g.beta, f, beta)
    _check(g.inputs, f, xs)


def test_lif_surrogate_grad_of_spikes():
    """Spike-path gradient equals the surrogate chain rule (reset detached) on a 1-step run."""
    rng = np.random.default_rng(30)
    w = rng.normal(size=(3, 2))
    b = np.zeros(2)
    layer = LIFLayer(w, b, np.full(2, 0.9), slope=25.0)
    xs = rng.random((1, 1, 3))
    _, _, _, tr = lif_forward(layer, LIFState.zeros(layer), xs)
    R = rng.normal(size=(1, 1, 2))
    g = lif_backward(layer, tr, grad_spikes=R)
    v = xs[0, 0] @ w
    sg = 1.0 / (1.0 + 25.0 * np.abs(v - 1.0)) ** 2
    np.testing.assert_allclose(g.weight, np.outer(xs[0, 0], R[0, 0] * sg))


# ---------------------------------------------------------------- properties

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 9), st.integers(3, 9), st.sampled_from([1, 3, 5]),
       st.integers(0, 2**31 - 1))
def test_dw_gather_equals_scatter(b, c, h, w, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, c, h, w)) * (rng.random((b, c, h, w)) < 0.4)
    ker = rng.normal(size=(c, k, k))
    np.testing.assert_allclose(L.dw_conv_forward(x, ker), L.dw_conv_forward(x, ker, sparse_input=True),
                               atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(2, 8), st.integers(2, 8), st.floats(-50, 50), st.floats(1, 100),
       st.integers(0, 2**31 - 1))
def test_instance_norm_is_affine_invariant(c, h, w, shift, scale, seed):
    # unit-variance planes so eps is negligible against the variance
    x = np.random.default_rng(seed).normal(size=(1, c, h, w))
    x = (x - x.mean(axis=(2, 3), keepdims=True)) / x.std(axis=(2, 3), keepdims=True)
    y1, _ = L.instance_norm(x)
    y2, _ = L.instance_norm(x * scale + shift)
    np.testing.assert_allclose(y1, y2, atol=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_pool_preserves_mean_on_exact_tiles(k, seed):
    x = np.random.default_rng(seed).normal(size=(1, 2, 3 * k, 2 * k))
    np.testing.assert_allclose(L.avg_pool(x, k).mean(axis=(2, 3)), x.mean(axis=(2, 3)), atol=1e-12)
