"""Finite-difference verification suite, runnable from the CLI.

Layer checks probe every coordinate of small float64 inputs against central
differences and must stay under 1e-5 relative error; the end-to-end checks
push a 32x32 batch through the whole model plus the combined loss and probe
a deterministic sample of input and parameter coordinates at 1e-3. The
suite is pure (fresh tensors per check) and deterministic.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .decoder import Decoder, PLDConfig
from .encoder import MixFFN, OverlapPatchEmbed, SpatialReductionAttention
from .model import SSFormer
from .rng import Rng
from .tensor import Tensor, grad_check
from .training import bce_loss, combined_loss, dice_loss

LAYER_TOL = 1e-5
END_TO_END_TOL = 1e-3


def _t(shape, seed, scale=1.0):
    return Tensor(Rng(seed).normal(int(np.prod(shape))).reshape(shape) * scale,
                  dtype=np.float64)


def _p(shape, seed, scale=1.0):
    t = _t(shape, seed, scale)
    t.requires_grad = True
    return t


def _sq_sum(y):
    return T.reduce_sum(T.mul(y, y))


def _cast64(layer):
    for _, p in layer.params("x"):
        p.data = p.data.astype(np.float64)
    return layer


def check_conv2d():
    w = _p((6, 2, 3, 3), 11)
    b = _p((6,), 12)
    x = _t((2, 4, 5, 5), 13)
    errs = [
        grad_check(lambda t: _sq_sum(nn.conv2d(t, w, b, stride=2, pad=1, groups=2)), _t((2, 4, 5, 5), 14)),
        grad_check(lambda t: _sq_sum(nn.conv2d(x, t, b, stride=2, pad=1, groups=2)), _t((6, 2, 3, 3), 15)),
        grad_check(lambda t: _sq_sum(nn.conv2d(x, w, t, stride=2, pad=1, groups=2)), _t((6,), 16)),
        grad_check(lambda t: _sq_sum(nn.conv2d(t, _p((4, 1, 3, 3), 17), None, pad=1, groups=4)), _t((1, 4, 6, 6), 18)),
    ]
    return max(errs)


def check_linear():
    w = _p((5, 7), 21)
    b = _p((7,), 22)
    errs = [
        grad_check(lambda t: _sq_sum(nn.linear(t, w, b)), _t((9, 5), 23)),
        grad_check(lambda t: _sq_sum(nn.linear(t, w, b)), _t((2, 9, 5), 24)),
        grad_check(lambda t: _sq_sum(nn.linear(t, w, b)), _t((2, 5, 3, 4), 25)),
        grad_check(lambda t: _sq_sum(nn.linear(_t((2, 9, 5), 26), t, b)), _t((5, 7), 27)),
        grad_check(lambda t: _sq_sum(nn.linear(_t((2, 9, 5), 26), w, t)), _t((7,), 28)),
    ]
    return max(errs)


def check_activations():
    errs = [
        grad_check(lambda t: _sq_sum(nn.relu(t)), _t((4, 6), 31)),
        grad_check(lambda t: _sq_sum(nn.gelu(t)), _t((4, 6), 32)),
        grad_check(lambda t: _sq_sum(nn.sigmoid(t)), _t((4, 6), 33)),
        grad_check(lambda t: _sq_sum(nn.softmax(t)), _t((3, 4, 6), 34)),
    ]
    return max(errs)


def check_layer_norm():
    g = _p((6,), 41)
    b = _p((6,), 42)
    x = _t((3, 5, 6), 43)
    errs = [
        grad_check(lambda t: _sq_sum(nn.layer_norm(t, g, b)), _t((3, 5, 6), 44)),
        grad_check(lambda t: _sq_sum(nn.layer_norm(x, t, b)), _t((6,), 45)),
        grad_check(lambda t: _sq_sum(nn.layer_norm(x, g, t)), _t((6,), 46)),
    ]
    return max(errs)


def check_bilinear():
    errs = [
        grad_check(lambda t: _sq_sum(nn.bilinear_resize(t, 7, 9)), _t((2, 3, 4, 5), 51)),
        grad_check(lambda t: _sq_sum(nn.bilinear_resize(t, 3, 2)), _t((2, 3, 6, 7), 52)),
    ]
    return max(errs)


def check_patch_embed():
    embed = _cast64(OverlapPatchEmbed(3, 8, kernel=7, stride=4, rng=Rng(61)))
    return grad_check(lambda t: _sq_sum(embed.forward(t)[0]), _t((1, 3, 16, 16), 62, 0.5))


def check_sr_attention():
    attn = _cast64(SpatialReductionAttention(8, heads=2, sr=2, rng=Rng(71)))
    return grad_check(lambda t: _sq_sum(attn.forward(t, 4, 4)), _t((2, 16, 8), 72, 0.5))


def check_mix_ffn():
    ffn = _cast64(MixFFN(8, expand=2, rng=Rng(81)))
    return grad_check(lambda t: _sq_sum(ffn.forward(t, 4, 4)), _t((2, 16, 8), 82, 0.5))


def check_local_emphasis():
    dec = Decoder((8, 8, 8, 8), PLDConfig(unified_dim=8), Rng(91))
    le = _cast64(dec.les[0])
    return grad_check(lambda t: _sq_sum(le.forward(t, (8, 8))), _t((1, 8, 4, 4), 92, 0.5))


def check_losses():
    target = Tensor((Rng(101).uniform(64) > 0.5).astype(np.float64).reshape(1, 1, 8, 8))
    errs = [
        grad_check(lambda t: dice_loss(T.reshape(t, (1, 1, 8, 8)), target), _t((64,), 102)),
        grad_check(lambda t: bce_loss(T.reshape(t, (1, 1, 8, 8)), target), _t((64,), 103)),
        grad_check(lambda t: combined_loss(T.reshape(t, (1, 1, 8, 8)), target), _t((64,), 104)),
    ]
    return max(errs)


def check_end_to_end():
    """Whole model + combined loss at 32x32, float64, sampled coordinates."""
    model = SSFormer("tiny", PLDConfig(unified_dim=16), seed=5, dtype=np.float64)
    target = Tensor((Rng(111).uniform(32 * 32) > 0.5).astype(np.float64).reshape(1, 1, 32, 32))
    x0 = _t((1, 3, 32, 32), 112, 0.5)

    def f(t):
        return combined_loss(model.forward(t), target)

    worst = grad_check(f, x0, max_coords=24, seed=7)

    params = model.named_params()
    probe_names = [
        "enc.s1.embed.w", "enc.s2.embed.w", "enc.s3.embed.w", "enc.s4.embed.w",
        "enc.s1.b0.attn.wq", "enc.s3.b0.ffn.dw", "enc.s2.b0.norm1_g",
        "pld.le1.w1", "pld.le4.w2", "pld.fuse2.wf", "pld.pred_w",
    ]
    x_fixed = _t((1, 3, 32, 32), 113, 0.5)
    for i, name in enumerate(probe_names):
        p = params[name]

        def fp(t, _p=p):
            return combined_loss(model.forward(x_fixed), target)

        worst = max(worst, grad_check(fp, p, max_coords=4, seed=20 + i))
    return worst


LAYER_CHECKS = [
    ("conv2d", check_conv2d),
    ("linear", check_linear),
    ("activations", check_activations),
    ("layer_norm", check_layer_norm),
    ("bilinear", check_bilinear),
    ("patch_embed", check_patch_embed),
    ("sr_attention", check_sr_attention),
    ("mix_ffn", check_mix_ffn),
    ("local_emphasis", check_local_emphasis),
    ("losses", check_losses),
]


def run_suite(emit=print) -> bool:
    ok = True
    for name, fn in LAYER_CHECKS:
        err = fn()
        good = err < LAYER_TOL
        ok = ok and good
        emit(f"{name}: max rel err {err:.3e} {'ok' if good else 'FAIL'} (tol {LAYER_TOL:g})")
    err = check_end_to_end()
    good = err < END_TO_END_TOL
    ok = ok and good
    emit(f"end_to_end: max rel err {err:.3e} {'ok' if good else 'FAIL'} (tol {END_TO_END_TOL:g})")
    return ok
