import numpy as np
import pytest

from odseg import backend

BACKENDS = backend.available()
pytestmark = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")


@pytest.fixture
def pair():
    return backend.get("cython"), backend.get("python")


def test_default_prefers_compiled():
    assert backend.NAME == "cython"


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_agrees(pair, dtype, rng):
    fast, slow = pair
    for _ in range(20):
        c, k, s = int(rng.integers(1, 4)), int(rng.choice([1, 2, 3])), int(rng.choice([1, 2]))
        dims = rng.integers(k, 9, size=3)
        out = [(n - k) // s + 1 for n in dims]
        x = rng.standard_normal((c, *dims)).astype(dtype)
        a = fast.im2col3d(x, k, s, *out)
        assert np.array_equal(a, slow.im2col3d(x, k, s, *out))
        cols = rng.standard_normal(a.shape).astype(dtype)
        np.testing.assert_allclose(fast.col2im3d(cols, c, *dims, k, s, *out),
                                   slow.col2im3d(cols, c, *dims, k, s, *out), rtol=1e-6, atol=1e-6)


def test_naive_conv_agrees(pair, rng):
    fast, slow = pair
    x = rng.standard_normal((2, 5, 5, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(fast.conv3d_naive(x, w, b, 2, 1), slow.conv3d_naive(x, w, b, 2, 1),
                               atol=1e-12, rtol=0)


def test_labelling_agrees(pair, rng):
    fast, slow = pair
    for _ in range(30):
        m = (rng.random((9, 8, 7)) < rng.uniform(0.05, 0.5)).astype(np.uint8)
        la, na = fast.label26(m)
        lb, nb = slow.label26(m)
        assert na == nb and np.array_equal(la, lb)
