import struct

import numpy as np
import pytest

from spikegaze import model as M
from spikegaze import weights as W


@pytest.fixture
def params():
    p, _ = M.build(M.ModelConfig(n=8, seed=2))
    return p


def test_roundtrip_exact(tmp_path, params):
    path = tmp_path / "w.sgz"
    W.save(params, str(path))
    back = W.load(str(path))
    assert back.config == params.config
    for k, v in params.tensors.items():
        assert back.tensors[k].dtype == v.dtype and np.array_equal(back.tensors[k], v)
    W.save(back, str(tmp_path / "w2.sgz"))
    assert path.read_bytes() == (tmp_path / "w2.sgz").read_bytes()


def test_roundtrip_float64_and_no_dsc():
    p, _ = M.build(M.ModelConfig(n=3, use_dsc=False, dtype="float64"))
    back = W.from_bytes(W.to_bytes(p))
    assert back.config.use_dsc is False
    assert all(np.array_equal(back.tensors[k], v) for k, v in p.tensors.items())


def test_loaded_model_predicts_identically(params):
    back = W.from_bytes(W.to_bytes(params))
    frames = np.random.default_rng(0).poisson(0.02, size=(20, 2, 60, 80)).astype(np.float32)
    a, _, _ = M.forward_sequence(params, M.initial_state(params), frames, keep_trace=False)
    b, _, _ = M.forward_sequence(back, M.initial_state(back), frames, keep_trace=False)
    assert np.array_equal(a, b)


def test_truncation_detected(params):
    data = W.to_bytes(params)
    for cut in (3, 10, len(data) // 2, len(data) - 1):
        with pytest.raises(W.WeightFileError):
            W.from_bytes(data[:cut])
    with pytest.raises(W.TruncatedError):
        W.from_bytes(data[:len(data) // 2])


def test_corruption_detected(params):
    data = bytearray(W.to_bytes(params))
    data[-20] ^= 0xFF
    with pytest.raises(W.WeightFileError, match="checksum"):
        W.from_bytes(bytes(data))


def test_bad_magic_and_version(params):
    data = W.to_bytes(params)
    with pytest.raises(W.WeightFileError):
        W.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(W.VersionError):
        W.from_bytes(data[:4] + struct.pack("<I", 2) + data[8:])


def test_shape_mismatch_against_config(params):
    with pytest.raises(W.ShapeMismatchError):
        W.from_bytes(W.to_bytes(params), config=M.ModelConfig(n=16))


def test_load_casts_to_requested_dtype(params):
    back = W.from_bytes(W.to_bytes(params), config=M.ModelConfig(n=8, seed=2, dtype="float64"))
    assert back.tensors["lif1.weight"].dtype == np.float64
    assert np.array_equal(back.tensors["lif1.weight"], params.tensors["lif1.weight"].astype(np.float64))
