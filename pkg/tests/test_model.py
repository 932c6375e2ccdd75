import numpy as np
import pytest

from spikegaze import model as M
from test_nn import fd_grad, rel_err


def small_params(n=4, use_dsc=True, seed=0, **kw):
    params, state = M.build(M.ModelConfig(n=n, use_dsc=use_dsc, seed=seed, dtype="float64", **kw))
    return params, state


def random_frames(rng, b, density=0.02):
    f = (rng.random((b, *M.FRAME_SHAPE)) < density) * rng.integers(1, 4, size=(b, *M.FRAME_SHAPE))
    return f.astype(np.float64)


@pytest.mark.parametrize("n,expected", [(128, 107014), (256, 188934), (512, 352774)])
def test_param_counts(n, expected):
    assert M.count_params(M.ModelConfig(n=n)) == expected
    params, _ = M.build(M.ModelConfig(n=n))
    assert params.count() == expected


@pytest.mark.parametrize("n", [1, 7, 64, 1000])
def test_param_formula(n):
    assert M.count_params(M.ModelConfig(n=n)) == 640 * n + 25094
    assert M.count_params(M.ModelConfig(n=n, use_dsc=False)) == 3712 * n + 122372


def test_spatial_trace_and_flatten():
    assert M.spatial_trace() == [(60, 80), (20, 26), (6, 8), (1, 2)]
    assert M.flatten_width(128) == 256
    params, _ = small_params(n=5)
    feats = M.frontend_forward(params, random_frames(np.random.default_rng(0), 2))
    assert feats.shape == (2, 10)


def test_build_is_seeded_and_betas_in_range():
    a, _ = M.build(M.ModelConfig(n=8, seed=3))
    b, _ = M.build(M.ModelConfig(n=8, seed=3))
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k])
    for i in (1, 2):
        beta = a.tensors[f"lif{i}.beta"]
        assert np.all((beta >= 0.9) & (beta <= 1.0))
    assert np.all(a.tensors["lif3.beta"] == np.float32(0.9))
    assert "lif1.beta" not in M.trainable_names(a.config)


def test_empty_frames_give_zero_features():
    params, _ = small_params()
    frames = random_frames(np.random.default_rng(1), 4)
    frames[1] = 0
    feats = M.frontend_forward(params, frames)
    assert np.all(feats[1] == 0)
    assert np.any(feats[0] != 0)
    # the skip is exact: the dense path also maps an empty frame to zero features
    dense, _ = M._frontend_dense(params, np.ascontiguousarray(frames[1:2]))
    assert np.all(dense == 0)


def test_frontend_batch_independent():
    params, _ = small_params()
    frames = random_frames(np.random.default_rng(2), 5)
    full = M.frontend_forward(params, frames)
    for i in range(5):
        np.testing.assert_allclose(M.frontend_forward(params, frames[i:i + 1])[0], full[i], atol=1e-12)


@pytest.mark.parametrize("use_dsc", [True, False])
def test_frontend_gradient_matches_finite_differences(use_dsc):
    rng = np.random.default_rng(3)
    params, _ = small_params(n=3, use_dsc=use_dsc)
    frames = random_frames(rng, 2, density=0.05)
    R = rng.normal(size=(2, M.flatten_width(3)))

    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    M.frontend_backward(params, frames, R, grads)

    def f():
        return float(np.sum(M.frontend_forward(params, frames) * R))

    for name in M.conv_op_names(params.config):
        t = params.tensors[name]
        flat = t.reshape(-1)
        idx = rng.choice(flat.size, size=min(12, flat.size), replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            view = flat[i:i + 1]
            num[j] = fd_grad(f, view)[0]
        assert rel_err(grads[name].reshape(-1)[idx], num) <= 1e-4, name


def test_full_model_gradient_with_silent_hidden_layers():
    """With unreachable thresholds the hidden layers stay silent; output gradients are exact."""
    rng = np.random.default_rng(4)
    params, _ = small_params(n=2, theta=1e6)
    window = random_frames(rng, 6).reshape(6, 1, *M.FRAME_SHAPE)
    params.tensors["lif3.bias"][:] = rng.normal(size=2)
    R = rng.normal(size=(6, 1, 2))

    def f():
        pred, _, _ = M.forward_sequence(params, M.initial_state(params), window)
        return float(np.sum(pred * R))

    _, _, trace = M.forward_sequence(params, M.initial_state(params), window)
    grads = M.backward_sequence(params, trace, R)
    for name in ("lif3.bias", "lif3.beta"):
        assert rel_err(grads[name], fd_grad(f, params.tensors[name])) <= 1e-4


def test_full_model_gradient_spiking_regime():
    """Parameters that do not cross a spike boundary under a small nudge agree with finite differences."""
    rng = np.random.default_rng(5)
    params, _ = small_params(n=4)
    params.tensors["lif1.weight"] *= 3.0
    window = random_frames(rng, 8, density=0.05).reshape(8, 1, *M.FRAME_SHAPE)
    R = rng.normal(size=(8, 1, 2))

    def f():
        pred, _, _ = M.forward_sequence(params, M.initial_state(params), window)
        return float(np.sum(pred * R))

    _, _, trace = M.forward_sequence(params, M.initial_state(params), window)
    assert trace.lif[0].spikes.sum() > 0
    grads = M.backward_sequence(params, trace, R)
    # the readout layer sees spikes as fixed inputs: exact
    for name in ("lif3.weight", "lif3.bias", "lif3.beta"):
        assert rel_err(grads[name], fd_grad(f, params.tensors[name])) <= 1e-4


def test_forward_step_matches_sequence():
    params, state = M.build(M.ModelConfig(n=8))
    rng = np.random.default_rng(6)
    window = random_frames(rng, 30).astype(np.float32)
    window[5:9] = 0
    preds, final, _ = M.forward_sequence(params, state, window, keep_trace=False)
    st = M.initial_state(params)
    for t in range(30):
        p, st = M.forward_step(params, st, window[t])
        assert np.array_equal(p, preds[t])
    for a, b in zip(st.layers, final.layers):
        assert np.array_equal(a.mem, b.mem)


def test_forward_rejects_wrong_frame_shape():
    params, state = M.build(M.ModelConfig(n=4))
    with pytest.raises(ValueError):
        M.forward_step(params, state, np.zeros((2, 30, 40)))


def test_no_dsc_has_dense_convs():
    cfg = M.ModelConfig(n=4, use_dsc=False)
    shapes = M.tensor_shapes(cfg)
    assert shapes["conv1.w"] == (32, 2, 7, 7)
    assert shapes["conv3.w"] == (4, 128, 5, 5)
    assert "conv1.dw" not in shapes


def test_pixel_conversion_roundtrip():
    xy = np.array([[40.0, 30.0], [0.0, 59.5]])
    np.testing.assert_allclose(M.to_pixels(M.to_normalized(xy)), xy)


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(n=0)
    with pytest.raises(ValueError):
        M.ModelConfig(dtype="float16")
