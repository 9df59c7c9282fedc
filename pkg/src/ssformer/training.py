"""Losses, metrics, the optimizer, and the train/eval loops.

The loss is soft dice plus binary cross-entropy at unit weights. Dice is
aggregated over the whole batch (smoothing eps 1); the mDice/mIoU metrics
are per-image and averaged, with empty-vs-empty scored as 1. Optimization
is AdamW with decoupled weight decay and a step-decay learning-rate
schedule (x0.1 every 40 epochs from 1e-4).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import DivergenceDetected, InvalidEpoch, InvalidTarget, ShapeMismatch
from .rng import Rng
from .tensor import Tensor, _record


def _check_binary(target: Tensor) -> None:
    d = target.data
    if not ((d == 0) | (d == 1)).all():
        bad = d[(d != 0) & (d != 1)].reshape(-1)
        raise InvalidTarget(f"target must be binary, found value {bad[0]!r}")


def dice_loss(logits: Tensor, target: Tensor, eps: float = 1.0) -> Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), p = sigmoid(logits)."""
    if logits.shape != target.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs target {target.shape}")
    _check_binary(target)
    p = nn.sigmoid(logits)
    inter = T.reduce_sum(T.mul(p, target))
    total = T.add(T.reduce_sum(p), T.reduce_sum(target))
    frac = T.div(T.add(T.mul(inter, 2.0), eps), T.add(total, eps))
    return T.add(T.mul(frac, -1.0), 1.0)


def bce_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Mean sigmoid cross-entropy in the overflow-free form
    max(x,0) - x*g + log(1 + exp(-|x|)); gradient is (sigmoid(x) - g)/n."""
    if logits.shape != target.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs target {target.shape}")
    _check_binary(target)
    x = logits.data
    g = target.data
    val = np.maximum(x, 0) - x * g + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(val.mean(), dtype=x.dtype)

    def backward(gout, _x=x, _g=g):
        s = np.empty_like(_x)
        pos = _x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-_x[pos]))
        ex = np.exp(_x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (gout * (s - _g) / _x.size,)

    return _record("bce", out, (logits,), backward)


def combined_loss(logits: Tensor, target: Tensor) -> Tensor:
    return T.add(dice_loss(logits, target), bce_loss(logits, target))


def binarize_logits(logits) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data > 0  # sigmoid(x) > 0.5 iff x > 0


def _pair_counts(pred, target):
    p = np.asarray(pred)
    g = np.asarray(target)
    if p.shape != g.shape:
        raise ShapeMismatch(f"mask pair shapes differ: {p.shape} vs {g.shape}")
    p = p > 0.5
    g = g > 0.5
    inter = int(np.logical_and(p, g).sum())
    return inter, int(p.sum()), int(g.sum())


def mean_dice(preds, targets) -> float:
    """Per-image 2|P∩G|/(|P|+|G|) averaged; empty vs empty counts as 1."""
    if len(preds) != len(targets):
        raise ShapeMismatch(f"{len(preds)} predictions vs {len(targets)} targets")
    scores = []
    for p, g in zip(preds, targets):
        inter, pa, ta = _pair_counts(p, g)
        scores.append(1.0 if pa + ta == 0 else 2.0 * inter / (pa + ta))
    return float(np.mean(scores))


def mean_iou(preds, targets) -> float:
    if len(preds) != len(targets):
        raise ShapeMismatch(f"{len(preds)} predictions vs {len(targets)} targets")
    scores = []
    for p, g in zip(preds, targets):
        inter, pa, ta = _pair_counts(p, g)
        union = pa + ta - inter
        scores.append(1.0 if union == 0 else inter / union)
    return float(np.mean(scores))


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 1e-4
    decay_factor: float = 0.1
    decay_period_epochs: int = 40
    total_epochs: int = 200


def lr_at(epoch: int, s: Schedule) -> float:
    if not 0 <= epoch < s.total_epochs:
        raise InvalidEpoch(f"epoch {epoch} outside [0, {s.total_epochs})")
    return s.base_lr * s.decay_factor ** (epoch // s.decay_period_epochs)


class AdamW:
    """Adam with decoupled weight decay applied directly to the parameter."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * update


def _stack_batch(samples, augment_rng: Rng | None):
    from . import data  # local import: data pulls this module's metrics

    images = []
    masks = []
    for s in samples:
        if augment_rng is not None:
            s = data.augment(s, augment_rng)
        images.append(s.image)
        masks.append(s.mask)
    x = Tensor(np.stack(images).astype(np.float32))
    g = Tensor(np.stack(masks).astype(np.float32))
    return x, g


def train_epoch(model, samples, optim: AdamW, rng: Rng,
                batch_size: int = 4, augment: bool = True):
    """One pass over the dataset; returns (mean loss, train mDice).

    Order is a deterministic shuffle of `rng`; a non-finite loss aborts
    with the offending batch index.
    """
    if not samples:
        raise InvalidTarget("empty dataset")
    order = list(range(len(samples)))
    rng.shuffle(order)
    loss_total = 0.0
    preds = []
    targets = []
    for batch_id, start in enumerate(range(0, len(order), batch_size)):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        x, g = _stack_batch(chunk, rng if augment else None)
        with T.Tape() as tape:
            logits = model.forward(x)
            loss = combined_loss(logits, g)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceDetected(f"non-finite loss {value} in batch {batch_id}",
                                     batch_index=batch_id)
        grads = tape.backward(loss)
        optim.step(grads)
        loss_total += value * len(chunk)
        for i in range(len(chunk)):
            preds.append(binarize_logits(logits.data[i, 0]))
            targets.append(g.data[i, 0])
    return loss_total / len(samples), mean_dice(preds, targets)


def evaluate(model, samples, batch_size: int = 8):
    """(mDice, mIoU) at threshold 0.5, no augmentation, params untouched."""
    if not samples:
        raise InvalidTarget("empty dataset")
    preds = []
    targets = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x, g = _stack_batch(chunk, None)
        logits = model.forward(x)
        for i in range(len(chunk)):
            preds.append(binarize_logits(logits.data[i, 0]))
            targets.append(g.data[i, 0])
    return mean_dice(preds, targets), mean_iou(preds, targets)
