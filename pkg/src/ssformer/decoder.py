"""Progressive locality decoder.

Every pyramid level is first passed through a local-emphasis block (two 3x3
convolutions with relu, weights unshared across levels) and upsampled to the
stage-1 resolution H/4 x W/4. The aligned maps are then fused stepwise from
the deepest level to the shallowest; each fusion unit is concat+linear (or
add+linear) followed by a per-position linear fusion layer with relu. A
final linear head produces one logit channel, upsampled x4 back to the
input resolution.

Both halves can be ablated: `le_enabled=False` swaps the emphasis block for
a bare 1x1 channel alignment, `sfa_enabled=False` swaps the stepwise chain
for a parallel sum of all four maps through a single linear layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ShapeMismatch
from .rng import Rng


@dataclass(frozen=True)
class PLDConfig:
    unified_dim: int = 64
    fusion_mode: str = "cat"
    le_enabled: bool = True
    sfa_enabled: bool = True

    def __post_init__(self):
        if self.fusion_mode not in ("cat", "add"):
            raise ValueError(f"fusion_mode must be cat or add, got {self.fusion_mode!r}")
        if self.unified_dim < 1:
            raise ValueError(f"unified_dim must be >= 1, got {self.unified_dim}")


class LocalEmphasis:
    """conv3x3(C_i->C) relu conv3x3(C->C) relu, then upsample to target."""

    def __init__(self, cin: int, c: int, rng: Rng):
        self.cin = cin
        self.w1 = nn.he_normal((c, cin, 3, 3), rng, fan_in=cin * 9)
        self.b1 = nn.zeros_param((c,))
        self.w2 = nn.he_normal((c, c, 3, 3), rng, fan_in=c * 9)
        self.b2 = nn.zeros_param((c,))

    def forward(self, f: T.Tensor, target_hw: tuple) -> T.Tensor:
        if f.shape[1] != self.cin:
            raise ShapeMismatch(f"expected {self.cin} channels, got {f.shape[1]}")
        y = nn.relu(nn.conv2d(f, self.w1, self.b1, stride=1, pad=1))
        y = nn.relu(nn.conv2d(y, self.w2, self.b2, stride=1, pad=1))
        if y.shape[2:] != target_hw:
            y = nn.bilinear_resize(y, *target_hw)
        return y

    def params(self, prefix: str):
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


class ChannelAlign:
    """Ablation stand-in for local emphasis: 1x1 conv + upsample only."""

    def __init__(self, cin: int, c: int, rng: Rng):
        self.cin = cin
        self.w = nn.he_normal((c, cin, 1, 1), rng, fan_in=cin)
        self.b = nn.zeros_param((c,))

    def forward(self, f: T.Tensor, target_hw: tuple) -> T.Tensor:
        if f.shape[1] != self.cin:
            raise ShapeMismatch(f"expected {self.cin} channels, got {f.shape[1]}")
        y = nn.conv2d(f, self.w, self.b)
        if y.shape[2:] != target_hw:
            y = nn.bilinear_resize(y, *target_hw)
        return y

    def params(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class FuseStep:
    """One fusion unit plus its linear fusion layer.

    cat mode concatenates (shallower, deeper) and projects 2C->C; add mode
    sums and projects C->C. The follow-up C->C layer ends in relu.
    """

    def __init__(self, c: int, mode: str, rng: Rng):
        self.mode = mode
        if mode == "cat":
            self.wf = nn.xavier_normal((2 * c, c), rng, 2 * c, c)
        else:
            self.wf = nn.xavier_normal((c, c), rng, c, c)
        self.bf = nn.zeros_param((c,))
        self.wp = nn.xavier_normal((c, c), rng, c, c)
        self.bp = nn.zeros_param((c,))

    def forward(self, g_deeper: T.Tensor, f_shallower: T.Tensor) -> T.Tensor:
        if g_deeper.shape != f_shallower.shape:
            raise ShapeMismatch(f"fusion inputs differ: {g_deeper.shape} vs {f_shallower.shape}")
        if self.mode == "cat":
            y = nn.linear(T.concat_channels(f_shallower, g_deeper, axis=1), self.wf, self.bf)
        else:
            y = nn.linear(T.add(g_deeper, f_shallower), self.wf, self.bf)
        return nn.relu(nn.linear(y, self.wp, self.bp))

    def params(self, prefix: str):
        for name in ("wf", "bf", "wp", "bp"):
            yield f"{prefix}.{name}", getattr(self, name)


class Decoder:
    def __init__(self, stage_dims: tuple, cfg: PLDConfig, rng: Rng):
        self.cfg = cfg
        self.stage_dims = tuple(stage_dims)
        c = cfg.unified_dim
        emphasis = LocalEmphasis if cfg.le_enabled else ChannelAlign
        self.les = [emphasis(cin, c, rng) for cin in self.stage_dims]
        if cfg.sfa_enabled:
            # steps run deepest-first: G3 from (G4, LE3), then G2, then G1
            self.fuse_steps = [FuseStep(c, cfg.fusion_mode, rng) for _ in range(3)]
        else:
            self.wsum = nn.xavier_normal((c, c), rng, c, c)
            self.bsum = nn.zeros_param((c,))
        self.wpred = nn.xavier_normal((c, 1), rng, c, 1)
        self.bpred = nn.zeros_param((1,))

    def _check_pyramid(self, feats):
        if len(feats) != 4:
            raise ShapeMismatch(f"expected 4 pyramid levels, got {len(feats)}")
        n, _, h, w = feats[0].shape
        for i, f in enumerate(feats):
            want = (n, self.stage_dims[i], h >> i, w >> i)
            if f.shape != want:
                raise ShapeMismatch(f"level {i + 1} shape {f.shape}, expected {want}")

    def forward(self, feats, trace: dict | None = None):
        """Fuse the pyramid into full-resolution logits [N,1,4*H/4,4*W/4].

        `trace`, when given, is filled with the tape node index of each
        fused map, which pins down the fusion order in tests.
        """
        self._check_pyramid(feats)
        target = feats[0].shape[2:]
        les = [le.forward(f, target) for le, f in zip(self.les, feats)]

        if self.cfg.sfa_enabled:
            g = les[3]
            if trace is not None:
                trace["g4"] = g.node_id
            for step, idx in zip(self.fuse_steps, (2, 1, 0)):
                g = step.forward(g, les[idx])
                if trace is not None:
                    trace[f"g{idx + 1}"] = g.node_id
        else:
            s = T.add(T.add(les[0], les[1]), T.add(les[2], les[3]))
            g = nn.relu(nn.linear(s, self.wsum, self.bsum))
            if trace is not None:
                trace["g1"] = g.node_id

        logits = nn.linear(g, self.wpred, self.bpred)
        out = nn.bilinear_resize(logits, 4 * target[0], 4 * target[1])
        return out

    def intermediates(self, feats):
        """Per-stage emphasized and fused maps, for heatmap export.

        Returns (les, fused) with four entries each; without the stepwise
        chain all four fused slots hold the single parallel fusion result.
        """
        self._check_pyramid(feats)
        target = feats[0].shape[2:]
        les = [le.forward(f, target) for le, f in zip(self.les, feats)]
        if self.cfg.sfa_enabled:
            fused = [None, None, None, les[3]]
            g = les[3]
            for step, idx in zip(self.fuse_steps, (2, 1, 0)):
                g = step.forward(g, les[idx])
                fused[idx] = g
        else:
            s = T.add(T.add(les[0], les[1]), T.add(les[2], les[3]))
            g = nn.relu(nn.linear(s, self.wsum, self.bsum))
            fused = [g, g, g, g]
        return les, fused

    def params(self, prefix: str = "pld"):
        for i, le in enumerate(self.les, start=1):
            yield from le.params(f"{prefix}.le{i}")
        if self.cfg.sfa_enabled:
            for i, step in enumerate(self.fuse_steps):
                yield from step.params(f"{prefix}.fuse{3 - i}")
        else:
            yield f"{prefix}.sum_w", self.wsum
            yield f"{prefix}.sum_b", self.bsum
        yield f"{prefix}.pred_w", self.wpred
        yield f"{prefix}.pred_b", self.bpred


def feature_heatmap(g: T.Tensor | np.ndarray) -> np.ndarray:
    """Channel L2 magnitude per pixel, min-max normalized to [0,1].

    Constant maps come back as all zeros. Uses batch element 0.
    """
    data = g.data if isinstance(g, T.Tensor) else np.asarray(g)
    if data.ndim == 4:
        data = data[0]
    heat = np.sqrt((data.astype(np.float64) ** 2).sum(axis=0))
    lo, hi = heat.min(), heat.max()
    if hi - lo == 0:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)
