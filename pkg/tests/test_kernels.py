import numpy as np
import pytest

from eraseg._kernels import _conv_numpy, backend_name, conv3x3_backward, conv3x3_forward
from oracles import conv3x3_oracle

try:
    from eraseg._kernels import _conv_cython

    HAVE_COMPILED = True
except ImportError:
    HAVE_COMPILED = False


def _case(seed, dtype, cin=3, cout=4, h=7, w=6):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(cin, h, w)).astype(dtype)
    wgt = rng.normal(size=(cout, cin, 3, 3)).astype(dtype)
    b = rng.normal(size=cout).astype(dtype)
    gy = rng.normal(size=(cout, h, w)).astype(dtype)
    return x, wgt, b, gy


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-4)])
def test_forward_matches_naive_oracle(dtype, tol):
    x, w, b, _ = _case(0, dtype)
    want = conv3x3_oracle(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64))
    got = conv3x3_forward(x, w, b)
    assert got.dtype == dtype
    np.testing.assert_allclose(got, want, rtol=tol, atol=tol)


def test_backward_matches_finite_differences():
    x, w, b, gy = _case(1, np.float64, cin=2, cout=3, h=5, w=4)
    gx, gw, gb = conv3x3_backward(x, w, gy)
    h = 1e-6

    def loss(xx, ww, bb):
        return float((conv3x3_forward(xx, ww, bb) * gy).sum())

    for arr, grad in ((x, gx), (w, gw), (b, gb)):
        flat = arr.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss(x, w, b)
            flat[i] = orig - h
            down = loss(x, w, b)
            flat[i] = orig
            fd = (up - down) / (2 * h)
            assert grad.ravel()[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled kernels not built")
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-4)])
def test_backends_agree(dtype, tol):
    x, w, b, gy = _case(2, dtype, cin=4, cout=5, h=9, w=8)
    y_c = np.asarray(_conv_cython.conv3x3_forward(x, w, b))
    y_n = _conv_numpy.conv3x3_forward(x, w, b)
    np.testing.assert_allclose(y_c, y_n, rtol=tol, atol=tol)
    for got, want in zip(
        _conv_cython.conv3x3_backward(x, w, gy), _conv_numpy.conv3x3_backward(x, w, gy)
    ):
        np.testing.assert_allclose(np.asarray(got), want, rtol=tol, atol=10 * tol)


def test_backend_name_is_valid():
    assert backend_name() in ("compiled", "numpy")
