"""Dense tensors and reverse-mode autodiff over a per-forward tape.

A `Tape` is rebuilt for every forward pass (define-by-run). Ops executed
while a tape is active append nodes in creation order, which is already a
topological order, so `Tape.backward` is a single reverse sweep. Tensors
are float32 for training and float64 for gradient checking; data lives in
contiguous row-major numpy arrays, images as N x C x H x W.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes,
python scalars, or a per-channel bias vector (axis 1 for rank-4 maps, the
last axis for token layouts).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import (
    InvalidAxis,
    InvalidReduction,
    InvalidShape,
    NumericalFailure,
    ShapeMismatch,
    TapeConsumed,
)
from .rng import Rng

_ACTIVE_TAPES: list["Tape"] = []


class Node:
    __slots__ = ("idx", "op", "parents", "backward_fn", "leaf")

    def __init__(self, idx, op, parents, backward_fn, leaf=None):
        self.idx = idx
        self.op = op
        self.parents = parents  # tuple[Node | None] aligned with the op's inputs
        self.backward_fn = backward_fn  # g -> tuple of parent grads (None allowed)
        self.leaf = leaf  # the parameter Tensor, for leaf nodes only


class Tape:
    """Ordered op records for one forward pass; backward may run once."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self.consumed = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def _add(self, op, parents, backward_fn, leaf=None) -> Node:
        node = Node(len(self.nodes), op, parents, backward_fn, leaf)
        self.nodes.append(node)
        return node

    def _leaf_node(self, t: "Tensor") -> Node:
        if t._tape is not self:
            t._tape = self
            t._node = self._add("leaf", (), None, leaf=t)
        return t._node

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        """Accumulate gradients from a scalar loss into every reachable leaf.

        Returns a map {leaf tensor -> gradient array}; leaves that were
        touched by the forward pass but are unreachable from the loss get
        zeros. Also mirrors each gradient into `leaf.grad`.
        """
        if self.consumed:
            raise TapeConsumed("backward() already ran on this tape")
        if loss.data.size != 1:
            raise InvalidReduction(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self or loss._node is None:
            raise InvalidReduction("loss is not connected to this tape")
        self.consumed = True

        reachable = set()
        stack = [loss._node]
        while stack:
            node = stack.pop()
            if node.idx in reachable:
                continue
            reachable.add(node.idx)
            stack.extend(p for p in node.parents if p is not None)

        grads = self.grads
        grads[loss._node.idx] = np.ones_like(loss.data)
        result: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            if node.idx not in reachable:
                if node.leaf is not None:
                    g = np.zeros_like(node.leaf.data)
                    node.leaf.grad = g
                    result[node.leaf] = g
                continue
            g = grads.get(node.idx)
            if g is None:
                continue
            if node.leaf is not None:
                node.leaf.grad = g
                result[node.leaf] = g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if parent is None or pg is None:
                    continue
                acc = grads.get(parent.idx)
                grads[parent.idx] = pg if acc is None else acc + pg
        return result


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise InvalidShape(f"rank {arr.ndim} > 4")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self):
        return None if self._node is None else self._node.idx

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars stay python floats so they never join the tape
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_extents(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise InvalidShape(f"extents must be >= 1, got {shape}")
    if len(shape) > 4:
        raise InvalidShape(f"rank {len(shape)} > 4")
    return shape


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(_check_extents(shape), dtype=dtype), requires_grad)


def full(shape, value: float, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.full(_check_extents(shape), value, dtype=dtype), requires_grad)


def randn(shape, seed: int, std: float = 1.0, dtype=np.float32, requires_grad=False) -> Tensor:
    """Seeded normal fill; identical bytes for identical (seed, shape, std)."""
    shape = _check_extents(shape)
    if std <= 0:
        raise InvalidShape(f"std must be > 0, got {std}")
    data = Rng(seed).normal(int(np.prod(shape)), std=std).reshape(shape)
    return Tensor(data.astype(dtype), requires_grad)


def _active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _parent_nodes(tape: Tape, inputs) -> tuple:
    parents = []
    for t in inputs:
        if t._tape is tape and t._node is not None:
            parents.append(t._node)
        elif t.requires_grad:
            parents.append(tape._leaf_node(t))
        else:
            parents.append(None)
    return tuple(parents)


def _record(op: str, out_data, inputs, backward_fn) -> Tensor:
    """Wrap an op result, appending a tape node when gradients are wanted."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    out._tape = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out._tape = tape
        out._node = tape._add(op, _parent_nodes(tape, inputs), backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise ops with channel-bias broadcasting


def _broadcast_info(a: Tensor, b: Tensor):
    """Return (b_view_shape, reduce_axes) or raise ShapeMismatch."""
    if a.shape == b.shape:
        return b.shape, ()
    if b.data.ndim == 0 or b.data.size == 1 and b.data.ndim <= 1:
        return b.data.shape, tuple(range(len(a.shape)))
    if b.data.ndim == 1:
        c = b.shape[0]
        if len(a.shape) == 4 and a.shape[1] == c:
            return (1, c, 1, 1), (0, 2, 3)
        if len(a.shape) in (2, 3) and a.shape[-1] == c:
            return (1,) * (len(a.shape) - 1) + (c,), tuple(range(len(a.shape) - 1))
    raise ShapeMismatch(f"cannot broadcast {b.shape} onto {a.shape}")


def _ewise(op: str, a: Tensor, b, fwd, da_fn, db_fn) -> Tensor:
    if not isinstance(b, Tensor):
        bval = float(b)
        out_data = fwd(a.data, bval)

        def backward(g, _a=a.data, _b=bval):
            return (da_fn(g, _a, _b),)

        return _record(op, out_data, (a,), backward)

    view_shape, reduce_axes = _broadcast_info(a, b)
    bdata = b.data.reshape(view_shape) if view_shape != b.shape else b.data
    out_data = fwd(a.data, bdata)

    def backward(g, _a=a.data, _b=bdata, _axes=reduce_axes, _shape=b.shape):
        ga = da_fn(g, _a, _b)
        gb = db_fn(g, _a, _b)
        if _axes:
            gb = gb.sum(axis=_axes)
        return ga, gb.reshape(_shape)

    return _record(op, out_data, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    return _ewise("add", a, b, lambda x, y: x + y,
                  lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _ewise("sub", a, b, lambda x, y: x - y,
                  lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _ewise("mul", a, b, lambda x, y: x * y,
                  lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a: Tensor, b) -> Tensor:
    return _ewise("div", a, b, lambda x, y: x / y,
                  lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g, _a=a.data, _b=b.data):
        return g @ _b.T, _a.T @ g

    return _record("matmul", out_data, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over leading axis: [B,m,k] @ [B,k,n]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeMismatch(f"bmm expects 3-d operands, got {a.shape} @ {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeMismatch(f"bad bmm shapes: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g, _a=a.data, _b=b.data):
        return g @ _b.swapaxes(1, 2), _a.swapaxes(1, 2) @ g

    return _record("bmm", out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and reindexing


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    seen = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise InvalidAxis(f"axis {ax} out of range for rank {ndim}")
        ax = ax % ndim
        if ax in seen:
            raise InvalidAxis(f"duplicate axis {ax}")
        seen.append(ax)
    return tuple(seen)


def reduce_sum(x: Tensor, axes=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axes, x.data.ndim)
    out_data = x.data.sum(axis=axes if axes else None, keepdims=keepdims)

    def backward(g, _shape=x.shape, _axes=axes, _keep=keepdims):
        if not _keep:
            g = np.expand_dims(g, _axes) if _axes else g
        return (np.broadcast_to(g, _shape).copy(),)

    return _record("sum", np.asarray(out_data), (x,), backward)


def reduce_mean(x: Tensor, axes=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axes, x.data.ndim)
    count = int(np.prod([x.shape[ax] for ax in axes])) if axes else x.data.size
    out_data = x.data.mean(axis=axes if axes else None, keepdims=keepdims)

    def backward(g, _shape=x.shape, _axes=axes, _keep=keepdims, _n=count):
        if not _keep:
            g = np.expand_dims(g, _axes) if _axes else g
        return (np.broadcast_to(g, _shape).copy() / _n,)

    return _record("mean", np.asarray(out_data), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise InvalidShape(f"cannot reshape {x.shape} to {shape}")
    out_data = x.data.reshape(shape)

    def backward(g, _shape=x.shape):
        return (g.reshape(_shape),)

    return _record("reshape", out_data, (x,), backward)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise InvalidShape(f"{axes} is not a permutation of rank {x.data.ndim}")
    out_data = np.ascontiguousarray(x.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g, _inv=tuple(inv)):
        return (np.ascontiguousarray(g.transpose(_inv)),)

    return _record("permute", out_data, (x,), backward)


def concat_channels(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    if a.data.ndim != b.data.ndim:
        raise ShapeMismatch(f"rank mismatch: {a.shape} vs {b.shape}")
    for i, (sa, sb) in enumerate(zip(a.shape, b.shape)):
        if i != axis and sa != sb:
            raise ShapeMismatch(f"non-concat extents differ: {a.shape} vs {b.shape}")
    out_data = np.concatenate([a.data, b.data], axis=axis)
    split = a.shape[axis]

    def backward(g, _split=split, _axis=axis):
        idx_a = [slice(None)] * g.ndim
        idx_a[_axis] = slice(0, _split)
        idx_b = [slice(None)] * g.ndim
        idx_b[_axis] = slice(_split, None)
        return np.ascontiguousarray(g[tuple(idx_a)]), np.ascontiguousarray(g[tuple(idx_b)])

    return _record("concat", out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    `f` maps a float64 tensor to a scalar tensor. With `max_coords` set,
    only a deterministic sample of coordinates is probed, which is how the
    end-to-end model checks stay inside their time budget.
    """
    if x.data.dtype != np.float64:
        raise NumericalFailure("grad_check requires float64 input")
    if not 1e-7 <= eps <= 1e-3:
        raise NumericalFailure(f"eps {eps} outside [1e-7, 1e-3]")
    x.requires_grad = True
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise InvalidReduction("grad_check needs a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise NumericalFailure("f(x) is not finite")
    analytic = tape.backward(y).get(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        coords = Rng(seed)._words(max_coords) % np.uint64(n)
        coords = np.unique(coords.astype(np.int64))
    else:
        coords = range(n)

    worst = 0.0
    ga = analytic.reshape(-1)
    for i in coords:
        keep = flat[i]
        flat[i] = keep + eps
        hi = float(f(x).data.reshape(-1)[0])
        flat[i] = keep - eps
        lo = float(f(x).data.reshape(-1)[0])
        flat[i] = keep
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericalFailure(f"non-finite probe at coordinate {i}")
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(ga[i] - numeric) / max(1.0, abs(ga[i]), abs(numeric))
        worst = max(worst, err)
    return worst
