"""Progressive locality decoder: LE, fusion chain, ablations, heatmaps."""

import itertools

import numpy as np
import pytest

from ssformer import decoder as D
from ssformer import nn
from ssformer import tensor as T
from ssformer.errors import ShapeMismatch
from ssformer.model import SSFormer
from ssformer.rng import Rng

DIMS = (4, 8, 12, 16)


def _t(shape, seed, dtype=np.float32):
    return T.Tensor(Rng(seed).normal(int(np.prod(shape))).reshape(shape),
                    dtype=dtype)


def _pyr(n, base, seed, dims=DIMS, dtype=np.float32):
    """Hand-built pyramid with halving sides, stage-1 side = base = H/4."""
    return [_t((n, c, base >> i, base >> i), seed + i, dtype)
            for i, c in enumerate(dims)]


# -------------------------------------------------------------------------- LE

def test_le_stage1_passthrough_size():
    le = D.LocalEmphasis(4, 8, Rng(0))
    y = le.forward(_t((2, 4, 16, 16), 1), target_hw=(16, 16))
    assert y.shape == (2, 8, 16, 16)


def test_le_stage4_upsamples_8x():
    le = D.LocalEmphasis(16, 8, Rng(0))
    y = le.forward(_t((1, 16, 2, 2), 2), target_hw=(16, 16))
    assert y.shape == (1, 8, 16, 16)


def test_le_output_nonnegative():
    le = D.LocalEmphasis(4, 8, Rng(3))
    y = le.forward(_t((1, 4, 8, 8), 4), target_hw=(8, 8))
    assert y.data.min() >= 0.0  # relu before the (convex) upsample


def test_channel_align_is_1x1():
    ca = D.ChannelAlign(4, 8, Rng(0))
    assert ca.w.shape == (8, 4, 1, 1)
    y = ca.forward(_t((1, 4, 4, 4), 5), target_hw=(8, 8))
    assert y.shape == (1, 8, 8, 8)


# ------------------------------------------------------------------- fuse step

def test_add_fusion_identity_weights():
    c = 6
    step = D.FuseStep(c, "add", Rng(0))
    eye = np.eye(c, dtype=np.float32)
    step.wf.data = eye.copy()
    step.bf.data[:] = 0.0
    step.wp.data = eye.copy()
    step.bp.data[:] = 0.0
    g = T.Tensor(np.abs(Rng(6).normal(c * 16)).reshape(1, c, 4, 4))
    f = T.Tensor(np.abs(Rng(7).normal(c * 16)).reshape(1, c, 4, 4))
    np.testing.assert_allclose(step.forward(g, f).data, g.data + f.data,
                               atol=1e-6)


def test_cat_fusion_selector_weights():
    c = 5
    step = D.FuseStep(c, "cat", Rng(1))
    # concat order is (f_shallower, g_deeper); [I; 0] keeps the f half
    step.wf.data = np.vstack([np.eye(c), np.zeros((c, c))]).astype(np.float32)
    step.bf.data[:] = 0.0
    step.wp.data = np.eye(c, dtype=np.float32)
    step.bp.data[:] = 0.0
    g = T.Tensor(np.abs(Rng(8).normal(c * 9)).reshape(1, c, 3, 3))
    f = T.Tensor(np.abs(Rng(9).normal(c * 9)).reshape(1, c, 3, 3))
    np.testing.assert_allclose(step.forward(g, f).data, f.data, atol=1e-6)


def test_fusion_modes_same_output_shape():
    g, f = _t((2, 8, 4, 4), 10), _t((2, 8, 4, 4), 11)
    for mode in ("cat", "add"):
        step = D.FuseStep(8, mode, Rng(2))
        assert step.forward(g, f).shape == (2, 8, 4, 4)


def test_fuse_step_shape_mismatch():
    step = D.FuseStep(8, "cat", Rng(3))
    with pytest.raises(ShapeMismatch):
        step.forward(_t((1, 8, 4, 4), 12), _t((1, 8, 5, 5), 13))


# --------------------------------------------------------------------- decoder

@pytest.mark.parametrize("base,input_side", [(8, 32), (16, 64), (24, 96)])
def test_resolution_law(base, input_side):
    cfg = D.PLDConfig(unified_dim=8)
    dec = D.Decoder(DIMS, cfg, Rng(0))
    feats = _pyr(1, base, 20)
    les, fused = dec.intermediates(feats)
    for m in les:
        assert m.shape == (1, 8, base, base)
    logits = dec.forward(feats)
    assert logits.shape == (1, 1, input_side, input_side)


def test_fusion_order_tape_law():
    dec = D.Decoder(DIMS, D.PLDConfig(unified_dim=8), Rng(1))
    feats = _pyr(1, 8, 30)
    trace = {}
    with T.Tape():
        dec.forward(feats, trace=trace)
    assert trace["g4"] < trace["g3"] < trace["g2"] < trace["g1"]


def test_param_bookkeeping_cat_vs_add():
    c = 8
    cat = D.Decoder(DIMS, D.PLDConfig(unified_dim=c, fusion_mode="cat"), Rng(2))
    add = D.Decoder(DIMS, D.PLDConfig(unified_dim=c, fusion_mode="add"), Rng(2))

    def fuse_count(dec):
        return sum(int(np.prod(t.shape)) for name, t in dec.params()
                   if ".wf" in name or ".bf" in name)

    assert fuse_count(cat) == 3 * (2 * c * c + c)
    assert fuse_count(add) == 3 * (c * c + c)
    total = lambda d: sum(int(np.prod(t.shape)) for _, t in d.params())
    assert total(cat) - total(add) == 3 * c * c


def test_all_zero_pyramid_gives_constant_logits():
    dec = D.Decoder(DIMS, D.PLDConfig(unified_dim=8), Rng(3))
    dec.bpred.data[:] = 0.625
    feats = [T.zeros((1, c, 8 >> i, 8 >> i)) for i, c in enumerate(DIMS)]
    logits = dec.forward(feats).data
    np.testing.assert_allclose(logits, logits.reshape(-1)[0], atol=1e-6)


def test_inconsistent_pyramid_rejected():
    dec = D.Decoder(DIMS, D.PLDConfig(unified_dim=8), Rng(4))
    feats = _pyr(1, 8, 40)
    feats[2] = _t((1, 12, 3, 3), 41)  # breaks the halving law
    with pytest.raises(ShapeMismatch):
        dec.forward(feats)
    with pytest.raises(ShapeMismatch):
        dec.forward(feats[:3])


def test_gradient_reaches_every_patch_embed():
    model = SSFormer("tiny", seed=0)
    x = _t((1, 3, 32, 32), 50)
    with T.Tape() as tape:
        logits = model.forward(x)
        loss = T.reduce_mean(T.mul(logits, logits))
    grads = tape.backward(loss)
    named = model.named_params()
    for i in range(1, 5):
        g = grads[named[f"enc.s{i}.embed.w"]]
        assert float(np.abs(g).max()) > 0.0, f"stage {i} embed got zero grad"


# ------------------------------------------------------------------- ablations

@pytest.mark.parametrize("le,sfa", list(itertools.product([True, False], repeat=2)))
@pytest.mark.parametrize("mode", ["cat", "add"])
def test_ablation_variants_share_output_shape(le, sfa, mode):
    cfg = D.PLDConfig(unified_dim=8, fusion_mode=mode, le_enabled=le,
                      sfa_enabled=sfa)
    dec = D.Decoder(DIMS, cfg, Rng(5))
    logits = dec.forward(_pyr(2, 8, 60))
    assert logits.shape == (2, 1, 32, 32)


def test_sfa_off_sums_aligned_maps():
    cfg = D.PLDConfig(unified_dim=8, sfa_enabled=False)
    dec = D.Decoder(DIMS, cfg, Rng(6))
    feats = _pyr(1, 8, 70)
    les, fused = dec.intermediates(feats)
    assert all(f is fused[0] for f in fused)  # single parallel-fusion map

    total = sum(m.data.astype(np.float64) for m in les)
    for perm in itertools.permutations(range(4)):
        permuted = sum(les[i].data.astype(np.float64) for i in perm)
        np.testing.assert_allclose(permuted, total, atol=1e-10)
    want = nn.relu(nn.linear(T.Tensor(total.astype(np.float32)),
                             dec.wsum, dec.bsum)).data
    np.testing.assert_allclose(fused[0].data, want, atol=1e-5)


def test_le_off_uses_channel_align():
    dec = D.Decoder(DIMS, D.PLDConfig(unified_dim=8, le_enabled=False), Rng(7))
    assert all(isinstance(m, D.ChannelAlign) for m in dec.les)
    dec_on = D.Decoder(DIMS, D.PLDConfig(unified_dim=8), Rng(7))
    assert all(isinstance(m, D.LocalEmphasis) for m in dec_on.les)


def test_bad_fusion_mode_rejected():
    with pytest.raises(ValueError):
        D.PLDConfig(fusion_mode="mean")


# ------------------------------------------------------------- feature heatmap

def test_feature_heatmap_one_hot():
    g = np.zeros((1, 4, 5, 5), dtype=np.float32)
    g[0, :, 2, 3] = 2.0
    hm = D.feature_heatmap(g)
    assert hm.shape == (5, 5)
    assert hm[2, 3] == 1.0
    assert hm.sum() == 1.0


def test_feature_heatmap_range_and_scale_invariance():
    g = _t((1, 6, 4, 4), 80)
    hm = D.feature_heatmap(g)
    assert hm.min() >= 0.0 and hm.max() <= 1.0
    for lam in (0.3, 7.0):
        np.testing.assert_allclose(D.feature_heatmap(T.Tensor(g.data * lam)),
                                   hm, atol=1e-6)


def test_feature_heatmap_constant_is_zeros():
    np.testing.assert_array_equal(
        D.feature_heatmap(np.ones((1, 3, 4, 4), dtype=np.float32)),
        np.zeros((4, 4)))
