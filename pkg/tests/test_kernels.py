"""Compiled kernel backend vs the numpy fallback, and the dispatch switch."""

import subprocess
import sys

import numpy as np
import pytest

from ssformer import kernels, nn
from ssformer import tensor as T
from ssformer.rng import Rng

HAS_NATIVE = kernels.native_backend is not None
needs_native = pytest.mark.skipif(not HAS_NATIVE,
                                  reason="compiled extension not built")

CASES = [
    ((2, 3, 9, 9), 3, 1, 1),
    ((1, 4, 12, 12), 3, 2, 1),
    ((2, 3, 16, 16), 7, 4, 3),
    ((1, 2, 5, 7), 5, 1, 2),
    ((3, 1, 8, 8), 1, 1, 0),
]


def _x(shape, seed, dtype):
    return Rng(seed).normal(int(np.prod(shape))).reshape(shape).astype(dtype)


def test_backend_is_named():
    assert kernels.BACKEND in ("native", "numpy")


@needs_native
@pytest.mark.parametrize("shape,k,stride,pad", CASES)
def test_im2col_parity(shape, k, stride, pad):
    for dtype in (np.float32, np.float64):
        x = _x(shape, 11, dtype)
        a = kernels.native_backend.im2col(x, k, stride, pad)
        b = kernels.numpy_backend.im2col(x, k, stride, pad)
        assert a.dtype == b.dtype == dtype
        np.testing.assert_array_equal(a, b)  # pure gather, no arithmetic


@needs_native
@pytest.mark.parametrize("shape,k,stride,pad", CASES)
def test_col2im_parity(shape, k, stride, pad):
    n, c, h, w = shape
    for dtype, tol in ((np.float32, 1e-5), (np.float64, 1e-12)):
        cols_shape = kernels.numpy_backend.im2col(
            np.zeros(shape, dtype=dtype), k, stride, pad).shape
        cols = _x(cols_shape, 13, dtype)
        a = kernels.native_backend.col2im(cols, h, w, k, stride, pad)
        b = kernels.numpy_backend.col2im(cols, h, w, k, stride, pad)
        np.testing.assert_allclose(a, b, atol=tol)  # scatter-add order differs


@needs_native
def test_native_deterministic():
    x = _x((2, 4, 10, 10), 17, np.float32)
    a = kernels.native_backend.im2col(x, 3, 1, 1)
    b = kernels.native_backend.im2col(x, 3, 1, 1)
    assert a.tobytes() == b.tobytes()


def test_numpy_roundtrip_counts_overlaps():
    # col2im(im2col(x)) multiplies each pixel by its patch multiplicity
    x = np.ones((1, 1, 4, 4), dtype=np.float64)
    cols = kernels.numpy_backend.im2col(x, 3, 1, 1)
    back = kernels.numpy_backend.col2im(cols, 4, 4, 3, 1, 1)
    assert back[0, 0, 1, 1] == 9.0   # interior pixel sits in 9 patches
    assert back[0, 0, 0, 0] == 4.0   # corner pixel in 4


def test_conv_agrees_across_backends(monkeypatch):
    x = T.Tensor(_x((2, 3, 8, 8), 19, np.float32))
    w = T.Tensor(_x((4, 3, 3, 3), 23, np.float32) * 0.2)
    b = T.Tensor(_x((4,), 29, np.float32))

    monkeypatch.setattr(kernels, "im2col", kernels.numpy_backend.im2col)
    monkeypatch.setattr(kernels, "col2im", kernels.numpy_backend.col2im)
    via_numpy = nn.conv2d(x, w, b, stride=1, pad=1).data.copy()

    if not HAS_NATIVE:
        pytest.skip("compiled extension not built")
    monkeypatch.setattr(kernels, "im2col", kernels.native_backend.im2col)
    monkeypatch.setattr(kernels, "col2im", kernels.native_backend.col2im)
    via_native = nn.conv2d(x, w, b, stride=1, pad=1).data
    np.testing.assert_allclose(via_native, via_numpy, atol=1e-5)


def _backend_in_subprocess(env_value):
    code = "from ssformer import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True,
                         text=True, env={"PATH": "/usr/bin:/bin",
                                          "SSF_KERNELS": env_value})
    return out.stdout.strip(), out.returncode


def test_env_forces_numpy_backend():
    got, rc = _backend_in_subprocess("numpy")
    assert (got, rc) == ("numpy", 0)


@needs_native
def test_env_forces_native_backend():
    got, rc = _backend_in_subprocess("native")
    assert (got, rc) == ("native", 0)
