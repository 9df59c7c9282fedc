"""Neural layers as tape-recorded functionals.

Every function here consumes and returns `tensor.Tensor` values and appends
a single fused node to the active tape, so backward passes stay shallow.
Convolution routes its im2col/col2im through the `kernels` package, which
selects the compiled extension or the numpy fallback at import time.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import InvalidShape, ShapeMismatch
from .rng import Rng
from .tensor import Tensor, _record


def _conv_out(extent: int, k: int, stride: int, pad: int) -> int:
    out = (extent + 2 * pad - k) // stride + 1
    if out < 1:
        raise InvalidShape(f"kernel {k} stride {stride} pad {pad} does not fit extent {extent}")
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-d convolution, im2col + grouped GEMM. w is [Cout, Cin/groups, k, k]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d x and w, got {x.shape}, {w.shape}")
    n, cin, h, wdt = x.shape
    cout, cin_g, k, k2 = w.shape
    if k != k2:
        raise InvalidShape(f"kernel must be square, got {k}x{k2}")
    if cin % groups or cout % groups or cin_g * groups != cin:
        raise ShapeMismatch(
            f"groups={groups} incompatible with Cin={cin}, Cout={cout}, w Cin/g={cin_g}")
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({cout},)")
    oh = _conv_out(h, k, stride, pad)
    ow = _conv_out(wdt, k, stride, pad)

    cols = kernels.im2col(x.data, k, stride, pad)  # [N, Cin*k*k, L]
    length = oh * ow
    cols_g = cols.reshape(n, groups, cin_g * k * k, length)
    w_g = w.data.reshape(groups, cout // groups, cin_g * k * k)
    out = np.matmul(w_g[None], cols_g).reshape(n, cout, oh, ow)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def backward(g, _cols_g=cols_g, _w_g=w_g, _has_b=b is not None):
        gm = g.reshape(n, groups, cout // groups, length)
        dw = np.matmul(gm, _cols_g.swapaxes(2, 3)).sum(axis=0)
        dcols = np.matmul(_w_g.swapaxes(1, 2)[None], gm)
        dx = kernels.col2im(dcols.reshape(n, cin * k * k, length), h, wdt, k, stride, pad)
        db = g.sum(axis=(0, 2, 3)) if _has_b else None
        grads = [dx, dw.reshape(cout, cin_g, k, k)]
        if _has_b:
            grads.append(db)
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", out, inputs, backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-position projection along the channel axis.

    Accepts [T, C], [N, T, C] (channels last) or [N, C, H, W] maps; w is
    [Cin, Cout] and the output keeps the input layout.
    """
    if w.data.ndim != 2:
        raise ShapeMismatch(f"weight must be 2-d, got {w.shape}")
    cin, cout = w.shape
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({cout},)")
    ndim = x.data.ndim
    if ndim in (2, 3):
        if x.shape[-1] != cin:
            raise ShapeMismatch(f"last axis {x.shape} != Cin {cin}")
        x2 = x.data.reshape(-1, cin)
        out = x2 @ w.data
        if b is not None:
            out += b.data
        out_shape = x.shape[:-1] + (cout,)
        restore = None
    elif ndim == 4:
        if x.shape[1] != cin:
            raise ShapeMismatch(f"channel axis {x.shape} != Cin {cin}")
        nb, _, h, wd = x.shape
        x2 = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, cin)
        out = x2 @ w.data
        if b is not None:
            out += b.data
        out_shape = (nb, cout, h, wd)
        restore = (nb, h, wd)
    else:
        raise ShapeMismatch(f"linear expects rank 2, 3 or 4, got {x.shape}")

    if restore is None:
        out_data = out.reshape(out_shape)
    else:
        nb, h, wd = restore
        out_data = np.ascontiguousarray(out.reshape(nb, h, wd, cout).transpose(0, 3, 1, 2))

    def backward(g, _x2=x2, _w=w.data, _has_b=b is not None, _restore=restore):
        if _restore is None:
            g2 = g.reshape(-1, cout)
        else:
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        dx2 = g2 @ _w.T
        dw = _x2.T @ g2
        if _restore is None:
            dx = dx2.reshape(x.shape)
        else:
            nb, h, wd = _restore
            dx = np.ascontiguousarray(dx2.reshape(nb, h, wd, cin).transpose(0, 3, 1, 2))
        grads = [dx, dw]
        if _has_b:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("linear", out_data, inputs, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def backward(g, _mask=mask):
        return (g * _mask,)

    return _record("relu", out, (x,), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3))), c = sqrt(2/pi)."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g, _v=v, _t=t):
        sech2 = 1.0 - _t * _t
        d = 0.5 * (1.0 + _t) + 0.5 * _v * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * _v * _v)
        return (g * d,)

    return _record("gelu", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def backward(g, _s=out):
        return (g * _s * (1.0 - _s),)

    return _record("sigmoid", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis, then scale and shift. Fused backward."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"gamma/beta must be ({c},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g, _xhat=xhat, _inv=inv, _gamma=gamma.data, _c=c):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * _xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gz = g * _gamma
        dx = _inv * (gz - gz.mean(axis=-1, keepdims=True)
                     - _xhat * (gz * _xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record("layer_norm", out, (x, gamma, beta), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g, _y=y):
        return (_y * (g - (g * _y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (x,), backward)


# interpolation matrices, keyed by (in extent, out extent, dtype)
_INTERP_CACHE: dict = {}


def interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).str)
    mat = _INTERP_CACHE.get(key)
    if mat is not None:
        return mat
    dst = np.arange(n_out, dtype=np.float64)
    src = np.clip((dst + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    mat = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    mat[rows, i0] += (1.0 - w1).astype(dtype)
    mat[rows, i1] += w1.astype(dtype)
    _INTERP_CACHE[key] = mat
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers (align_corners false).

    Separable: y = A_h x A_w^T with cached interpolation matrices, so both
    directions are plain GEMMs and the backward pass is the exact transpose.
    """
    if x.data.ndim != 4:
        raise ShapeMismatch(f"expected [N,C,H,W], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise InvalidShape(f"output extents must be >= 1, got {out_h}x{out_w}")
    _, _, h, w = x.shape
    ah = interp_matrix(h, out_h, x.data.dtype)
    aw = interp_matrix(w, out_w, x.data.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g, _ah=ah, _aw=aw):
        return (np.matmul(np.matmul(_ah.T, g), _aw),)

    return _record("bilinear", out, (x,), backward)


# ---------------------------------------------------------------------------
# parameter initialisation


def he_normal(shape, rng: Rng, fan_in: int, dtype=np.float32) -> Tensor:
    data = rng.normal(int(np.prod(shape)), std=float(np.sqrt(2.0 / fan_in)))
    return Tensor(data.reshape(shape).astype(dtype), requires_grad=True)


def xavier_normal(shape, rng: Rng, fan_in: int, fan_out: int, dtype=np.float32) -> Tensor:
    std = float(np.sqrt(2.0 / (fan_in + fan_out)))
    data = rng.normal(int(np.prod(shape)), std=std)
    return Tensor(data.reshape(shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
