"""Pure-numpy versions of the compiled kernels.

Used when the extension module is unavailable (or forced via
SSF_KERNELS=numpy). Same contracts as _native; im2col gathers with a
strided window view, col2im scatter-adds through bincount.
"""

import numpy as np


def im2col(x, k, stride, pad):
    """[N,C,H,W] -> [N, C*k*k, OH*OW] patch matrix, zero-padded borders."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, oh, ow),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c * k * k, oh * ow)


def col2im(cols, h, w, k, stride, pad):
    """Adjoint of im2col: scatter-add [N, C*k*k, L] back to [N,C,H,W]."""
    n = cols.shape[0]
    c = cols.shape[1] // (k * k)
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    hp, wp = h + 2 * pad, w + 2 * pad

    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    i, j = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    ih = (i * stride).reshape(1, 1, 1, oh, ow) + ki[..., None, None]
    iw = (j * stride).reshape(1, 1, 1, oh, ow) + kj[..., None, None]
    flat = (ci[..., None, None] * hp + ih) * wp + iw  # indices inside the padded grid
    flat = flat.reshape(-1)

    out = np.empty((n, c, h, w), dtype=cols.dtype)
    size = c * hp * wp
    for b in range(n):
        acc = np.bincount(flat, weights=cols[b].reshape(-1), minlength=size)
        out[b] = acc.reshape(c, hp, wp)[:, pad:pad + h, pad:pad + w]
    return out
