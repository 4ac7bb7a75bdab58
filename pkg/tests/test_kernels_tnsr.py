import struct

import numpy as np
import pytest

from duostream import _kernels, tnsr
from duostream.tnsr import TnsrError

BACKENDS = ["numpy"] + (["numba"] if _kernels.HAS_NUMBA else [])


@pytest.fixture
def restore_backend():
    prev = _kernels.backend()
    yield
    _kernels.set_backend(prev)


def _run_all(rng):
    x = rng.normal(size=(2, 3, 6, 8)).astype(np.float32)
    cols = _kernels.im2col3x3(x)
    back = _kernels.col2im3x3(cols.copy(), 2, 3, 6, 8)
    pooled, idx = _kernels.maxpool2x2_forward(x)
    routed = _kernels.maxpool2x2_backward(np.ones_like(pooled), idx)
    py, px = rng.uniform(-2, 7, size=(2, 20)), rng.uniform(-2, 9, size=(2, 20))
    gathered = _kernels.bilinear_gather(x.astype(np.float64), py, px)
    scattered = _kernels.bilinear_scatter(np.ones_like(gathered), py, px, 6, 8)
    return cols, back, pooled, idx, routed, gathered, scattered


def test_backends_agree(restore_backend):
    outs = {}
    for name in BACKENDS:
        _kernels.set_backend(name)
        outs[name] = _run_all(np.random.default_rng(0))
    for a, b in zip(*outs.values()):
        assert np.allclose(a, b, atol=1e-6)


@pytest.mark.parametrize("name", BACKENDS)
def test_im2col_layout(name, restore_backend):
    _kernels.set_backend(name)
    x = np.arange(2 * 4 * 4, dtype=np.float32).reshape(1, 2, 4, 4)
    cols = _kernels.im2col3x3(x)
    assert cols.shape == (18, 16)
    # centre tap of channel 1 reproduces that channel
    assert np.array_equal(cols[9 + 4].reshape(4, 4), x[0, 1])
    # top-left tap at pixel (0, 0) reads the zero padding
    assert cols[0, 0] == 0


@pytest.mark.parametrize("name", BACKENDS)
def test_col2im_is_adjoint(name, restore_backend):
    _kernels.set_backend(name)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 4, 6))
    c = rng.normal(size=(27, 48))
    lhs = (_kernels.im2col3x3(x) * c).sum()
    rhs = (x * _kernels.col2im3x3(c, 2, 3, 4, 6)).sum()
    assert abs(lhs - rhs) < 1e-9


@pytest.mark.parametrize("name", BACKENDS)
def test_bilinear_gather_at_pixel_centres(name, restore_backend):
    _kernels.set_backend(name)
    img = np.arange(12, dtype=np.float64).reshape(1, 1, 3, 4)
    py = np.array([[0.0, 2.0, 1.5, -1.0]])
    px = np.array([[0.0, 3.0, 0.5, 0.0]])
    out = _kernels.bilinear_gather(img, py, px)[0, 0]
    assert out[0] == 0 and out[1] == 11
    assert out[2] == pytest.approx((4 + 5 + 8 + 9) / 4)
    assert out[3] == 0


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        _kernels.set_backend("cuda")


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def test_tnsr_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    arrays = {"a.weight": rng.normal(size=(3, 4, 3, 3)).astype(np.float32),
              "b": np.array([1.5, -0.0, np.float32(1e-30)], dtype=np.float32),
              "scalar": np.array(2.0, dtype=np.float32)}
    path = tmp_path / "x.tnsr"
    tnsr.save(path, arrays)
    back = tnsr.load(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == np.float32
        assert back[k].tobytes() == arrays[k].tobytes()
        assert back[k].shape == arrays[k].shape


def test_tnsr_layout():
    buf = tnsr.dumps({"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    assert buf[:6] == b"TNSR1\0"
    n = struct.unpack("<H", buf[6:8])[0]
    assert buf[8:8 + n] == b"w"
    code, ndim = buf[9], buf[10]
    assert (code, ndim) == (0, 2)
    assert struct.unpack("<II", buf[11:19]) == (1, 2)
    assert np.frombuffer(buf[19:], "<f4").tolist() == [1.0, 2.0]


def test_tnsr_rejects_garbage():
    with pytest.raises(TnsrError):
        tnsr.loads(b"NOTTNSR")
    buf = tnsr.dumps({"w": np.ones(4, dtype=np.float32)})
    with pytest.raises(TnsrError):
        tnsr.loads(buf[:-2])
