"""Four-stage pyramid Transformer encoder.

Each stage embeds the incoming map with an overlapping strided convolution,
runs `depth` pre-norm blocks (spatial-reduction attention, then a Mix-FFN
whose depthwise convolution carries positional information), and reshapes
the tokens back to an N x C x H x W map. Spatial extents halve per stage
after the initial /4 patch stride, so a S x S input yields maps of side
S/4, S/8, S/16 and S/32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import InvalidShape, NotRecorded, ShapeMismatch
from .rng import Rng


@dataclass(frozen=True)
class EncoderConfig:
    stage_dims: tuple = (16, 32, 64, 128)
    depths: tuple = (1, 1, 1, 1)
    heads: tuple = (1, 2, 4, 8)
    sr_ratios: tuple = (8, 4, 2, 1)
    patch_strides: tuple = field(default=(4, 2, 2, 2))
    patch_kernel: tuple = field(default=(7, 3, 3, 3))
    ffn_expand: int = 4

    def __post_init__(self):
        for name in ("stage_dims", "depths", "heads", "sr_ratios", "patch_strides", "patch_kernel"):
            if len(getattr(self, name)) != 4:
                raise InvalidShape(f"{name} must list 4 stages")
        for c, h in zip(self.stage_dims, self.heads):
            if c % h:
                raise InvalidShape(f"dim {c} not divisible by {h} heads")
        if any(sr < 1 for sr in self.sr_ratios):
            raise InvalidShape("sr ratios must be >= 1")


TINY = EncoderConfig()
SMALL = EncoderConfig(stage_dims=(32, 64, 160, 256), depths=(2, 2, 2, 2),
                      heads=(1, 2, 5, 8), sr_ratios=(8, 4, 2, 1))


class OverlapPatchEmbed:
    """Strided conv with kernel > stride, flattened to tokens + layer norm."""

    def __init__(self, cin: int, cout: int, kernel: int, stride: int, rng: Rng):
        self.kernel = kernel
        self.stride = stride
        self.w = nn.he_normal((cout, cin, kernel, kernel), rng, fan_in=cin * kernel * kernel)
        self.b = nn.zeros_param((cout,))
        self.norm_g = nn.ones_param((cout,))
        self.norm_b = nn.zeros_param((cout,))

    def forward(self, x: T.Tensor):
        if x.shape[2] % self.stride or x.shape[3] % self.stride:
            raise InvalidShape(
                f"input {x.shape[2]}x{x.shape[3]} not divisible by patch stride {self.stride}")
        y = nn.conv2d(x, self.w, self.b, stride=self.stride, pad=self.kernel // 2)
        n, c, h, w = y.shape
        tokens = T.permute(T.reshape(y, (n, c, h * w)), (0, 2, 1))
        return nn.layer_norm(tokens, self.norm_g, self.norm_b), (h, w)

    def params(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b
        yield f"{prefix}.norm_g", self.norm_g
        yield f"{prefix}.norm_b", self.norm_b


def _split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    n, t, c = x.shape
    dh = c // heads
    return T.reshape(T.permute(T.reshape(x, (n, t, heads, dh)), (0, 2, 1, 3)), (n * heads, t, dh))


def _merge_heads(x: T.Tensor, n: int, heads: int) -> T.Tensor:
    _, t, dh = x.shape
    return T.reshape(T.permute(T.reshape(x, (n, heads, t, dh)), (0, 2, 1, 3)), (n, t, heads * dh))


def _tokens_to_map(x: T.Tensor, h: int, w: int) -> T.Tensor:
    n, t, c = x.shape
    return T.permute(T.reshape(x, (n, h, w, c)), (0, 3, 1, 2))


def _map_to_tokens(x: T.Tensor) -> T.Tensor:
    n, c, h, w = x.shape
    return T.permute(T.reshape(x, (n, c, h * w)), (0, 2, 1))


class SpatialReductionAttention:
    """Self-attention with keys/values taken from an sr-strided conv grid.

    Queries come from every token; the scale is 1/sqrt(C/heads). With sr=1
    this is plain multi-head attention over all token pairs.
    """

    def __init__(self, c: int, heads: int, sr: int, rng: Rng):
        self.c = c
        self.heads = heads
        self.sr = sr
        self.wq = nn.xavier_normal((c, c), rng, c, c)
        self.bq = nn.zeros_param((c,))
        self.wk = nn.xavier_normal((c, c), rng, c, c)
        self.bk = nn.zeros_param((c,))
        self.wv = nn.xavier_normal((c, c), rng, c, c)
        self.bv = nn.zeros_param((c,))
        self.wo = nn.xavier_normal((c, c), rng, c, c)
        self.bo = nn.zeros_param((c,))
        if sr > 1:
            self.sr_w = nn.he_normal((c, c, sr, sr), rng, fan_in=c * sr * sr)
            self.sr_b = nn.zeros_param((c,))
            self.sr_norm_g = nn.ones_param((c,))
            self.sr_norm_b = nn.zeros_param((c,))

    def forward(self, tokens: T.Tensor, h: int, w: int, record: dict | None = None) -> T.Tensor:
        n, t, c = tokens.shape
        if t != h * w:
            raise InvalidShape(f"{t} tokens != {h}x{w} grid")
        if c != self.c or c % self.heads:
            raise InvalidShape(f"channel {c} incompatible with {self.heads} heads")
        if h % self.sr or w % self.sr:
            raise InvalidShape(f"sr {self.sr} does not divide grid {h}x{w}")

        q = nn.linear(tokens, self.wq, self.bq)
        if self.sr > 1:
            grid = _tokens_to_map(tokens, h, w)
            red = nn.conv2d(grid, self.sr_w, self.sr_b, stride=self.sr)
            kv = nn.layer_norm(_map_to_tokens(red), self.sr_norm_g, self.sr_norm_b)
        else:
            kv = tokens
        k = nn.linear(kv, self.wk, self.bk)
        v = nn.linear(kv, self.wv, self.bv)

        dh = c // self.heads
        qh = _split_heads(q, self.heads)
        kh = _split_heads(k, self.heads)
        vh = _split_heads(v, self.heads)
        logits = T.mul(T.bmm(qh, T.permute(kh, (0, 2, 1))), 1.0 / float(np.sqrt(dh)))
        attn = nn.softmax(logits)
        if record is not None:
            record["attn"] = attn.data.reshape(n, self.heads, t, -1).copy()
            record["kv_grid"] = (h // self.sr, w // self.sr)
        out = _merge_heads(T.bmm(attn, vh), n, self.heads)
        return nn.linear(out, self.wo, self.bo)

    def params(self, prefix: str):
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            yield f"{prefix}.{name}", getattr(self, name)
        if self.sr > 1:
            for name in ("sr_w", "sr_b", "sr_norm_g", "sr_norm_b"):
                yield f"{prefix}.{name}", getattr(self, name)


class MixFFN:
    """Expand, 3x3 depthwise conv over the token grid, gelu, project back."""

    def __init__(self, c: int, expand: int, rng: Rng):
        hidden = expand * c
        self.hidden = hidden
        self.w1 = nn.xavier_normal((c, hidden), rng, c, hidden)
        self.b1 = nn.zeros_param((hidden,))
        self.dw = nn.he_normal((hidden, 1, 3, 3), rng, fan_in=9)
        self.db = nn.zeros_param((hidden,))
        self.w2 = nn.xavier_normal((hidden, c), rng, hidden, c)
        self.b2 = nn.zeros_param((c,))

    def forward(self, tokens: T.Tensor, h: int, w: int) -> T.Tensor:
        n, t, _ = tokens.shape
        if t != h * w:
            raise ShapeMismatch(f"{t} tokens != {h}x{w} grid")
        y = nn.linear(tokens, self.w1, self.b1)
        grid = _tokens_to_map(y, h, w)
        grid = nn.conv2d(grid, self.dw, self.db, stride=1, pad=1, groups=self.hidden)
        y = nn.gelu(_map_to_tokens(grid))
        return nn.linear(y, self.w2, self.b2)

    def params(self, prefix: str):
        for name in ("w1", "b1", "dw", "db", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


class Block:
    """Pre-norm transformer block: LN -> attention -> residual, LN -> FFN -> residual."""

    def __init__(self, c: int, heads: int, sr: int, expand: int, rng: Rng):
        self.norm1_g = nn.ones_param((c,))
        self.norm1_b = nn.zeros_param((c,))
        self.attn = SpatialReductionAttention(c, heads, sr, rng)
        self.norm2_g = nn.ones_param((c,))
        self.norm2_b = nn.zeros_param((c,))
        self.ffn = MixFFN(c, expand, rng)

    def forward(self, tokens: T.Tensor, h: int, w: int, record: dict | None = None) -> T.Tensor:
        a = self.attn.forward(nn.layer_norm(tokens, self.norm1_g, self.norm1_b), h, w, record)
        tokens = T.add(tokens, a)
        f = self.ffn.forward(nn.layer_norm(tokens, self.norm2_g, self.norm2_b), h, w)
        return T.add(tokens, f)

    def params(self, prefix: str):
        yield f"{prefix}.norm1_g", self.norm1_g
        yield f"{prefix}.norm1_b", self.norm1_b
        yield from self.attn.params(f"{prefix}.attn")
        yield f"{prefix}.norm2_g", self.norm2_g
        yield f"{prefix}.norm2_b", self.norm2_b
        yield from self.ffn.params(f"{prefix}.ffn")


class Encoder:
    def __init__(self, cfg: EncoderConfig, rng: Rng):
        self.cfg = cfg
        self.embeds = []
        self.stages = []
        cin = 3
        for i in range(4):
            c = cfg.stage_dims[i]
            self.embeds.append(OverlapPatchEmbed(
                cin, c, cfg.patch_kernel[i], cfg.patch_strides[i], rng))
            self.stages.append([
                Block(c, cfg.heads[i], cfg.sr_ratios[i], cfg.ffn_expand, rng)
                for _ in range(cfg.depths[i])
            ])
            cin = c

    def forward(self, x: T.Tensor, record_attention: bool = False):
        """Emit the four-level feature pyramid; optionally keep per-stage
        attention (the last block of each stage) for heatmap export."""
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise InvalidShape(f"input {x.shape[2]}x{x.shape[3]} must be divisible by 32")
        feats = []
        records = []
        cur = x
        for embed, blocks in zip(self.embeds, self.stages):
            tokens, (h, w) = embed.forward(cur)
            rec: dict | None = {} if record_attention else None
            for block in blocks:
                tokens = block.forward(tokens, h, w, rec)
            cur = _tokens_to_map(tokens, h, w)
            feats.append(cur)
            records.append(rec)
        if record_attention:
            return feats, records
        return feats

    def params(self, prefix: str = "enc"):
        for i, (embed, blocks) in enumerate(zip(self.embeds, self.stages), start=1):
            yield from embed.params(f"{prefix}.s{i}.embed")
            for j, block in enumerate(blocks):
                yield from block.params(f"{prefix}.s{i}.b{j}")


def attention_heatmap(record: dict | None, query_index: int) -> np.ndarray:
    """Head-averaged attention row for one query, on the key grid in [0,1]."""
    if not record or "attn" not in record:
        raise NotRecorded("forward pass did not record attention")
    attn = record["attn"]
    kh, kw = record["kv_grid"]
    if not 0 <= query_index < attn.shape[2]:
        raise InvalidShape(f"query index {query_index} out of {attn.shape[2]} tokens")
    row = attn[0].mean(axis=0)[query_index].reshape(kh, kw)
    lo, hi = row.min(), row.max()
    if hi - lo == 0:
        return np.zeros_like(row)
    return (row - lo) / (hi - lo)
