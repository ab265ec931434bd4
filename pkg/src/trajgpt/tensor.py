"""Minimal deterministic reverse-mode autodiff over float64 numpy arrays.

Every op records a backward closure on the output tensor; `backward()` walks
the tape in reverse topological order. All storage is 64-bit, all kernels are
plain numpy, so identical seeds give bit-identical values and gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class EmptyReductionError(ValueError):
    """A reduction was requested over zero elements (empty input or all-masked)."""


class TapeError(RuntimeError):
    """The autodiff tape was misused (non-scalar loss, reused tape)."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus the tape bookkeeping needed for reverse mode.

    `grad` is allocated (zeros) at construction iff `requires_grad`; backward
    accumulates into it. Tensors are treated as immutable once an op has
    consumed them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_tape_used")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._tape_used = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        """Populate grads of every requires_grad tensor reachable from this scalar."""
        if self.data.shape != ():
            raise TapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._tape_used:
            raise TapeError("tape already consumed by a previous backward(); rebuild the graph")
        order = _toposort(self)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad[...] = 1.0
        for node in order:
            node._tape_used = True
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the named module functions are the primary API
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative postorder DFS, reversed; closure-pruned graphs stay small
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(out_data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        # grad stays None until backward reaches this node (lazy allocation)
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g)  # copy: g may alias another node's grad buffer
    else:
        t.grad += g


def _accum_owned(t: Tensor, g: np.ndarray) -> None:
    # for backward closures handing over a freshly allocated array that no
    # other tensor will ever see: the copy in _accum would be pure waste
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            (_accum if ga is g else _accum_owned)(a, ga)
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            (_accum if gb is g else _accum_owned)(b, gb)

    return _make(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            _accum_owned(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum_owned(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    """Matrix product. Supports 2-D x 2-D, batched with equal leading dims,
    and batched `a` against a 2-D `b` (the linear-layer case)."""
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward_fn(g):
        if a.requires_grad:
            _accum_owned(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.data.shape
                _accum_owned(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accum_owned(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _make(out_data, (a, b), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = astensor(x)
    out_data = x.data.reshape(shape)

    def backward_fn(g):
        if x.requires_grad:
            # view of g, whose buffer is dead once this node's backward ran
            _accum_owned(x, g.reshape(x.data.shape))

    return _make(out_data, (x,), backward_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = astensor(x)
    axes = tuple(axes)
    out_data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward_fn(g):
        if x.requires_grad:
            _accum_owned(x, np.transpose(g, inv))

    return _make(out_data, (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                # disjoint views of g: no two parents share bytes
                _accum_owned(t, piece)

    return _make(out_data, tensors, backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    """Full reduction to a scalar."""
    x = astensor(x)
    out_data = np.asarray(x.data.sum())

    def backward_fn(g):
        if x.requires_grad:
            _accum_owned(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(out_data, (x,), backward_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = astensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted, out=shifted)
    s = np.divide(e, e.sum(axis=axis, keepdims=True), out=e)

    def backward_fn(g):
        if x.requires_grad:
            tmp = g * s
            dot = tmp.sum(axis=axis, keepdims=True)
            np.subtract(g, dot, out=tmp)
            tmp *= s
            _accum_owned(x, tmp)

    return _make(s, (x,), backward_fn)


LAYERNORM_EPS = 1e-5


def layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Epsilon sits inside the sqrt, so a constant row maps to zeros rather
    than NaN.
    """
    x, gain, bias = astensor(x), astensor(gain), astensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm affine shapes {gain.shape}/{bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = xc * inv_std
    out_data = gain.data * xhat + bias.data

    def backward_fn(g):
        if gain.requires_grad:
            _accum_owned(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum_owned(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            tmp = dxhat * xhat
            m2 = tmp.mean(axis=-1, keepdims=True)
            np.multiply(xhat, m2, out=tmp)
            dxhat -= m1
            dxhat -= tmp
            dxhat *= inv_std
            _accum_owned(x, dxhat)

    return _make(out_data, (x, gain, bias), backward_fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GPT2-lineage tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = astensor(x)
    x2 = x.data * x.data  # np.power is an order of magnitude slower here
    u = np.asarray(x2 * x.data)  # asarray: 0-d results degrade to scalars
    u *= 0.044715
    u += x.data
    u *= _GELU_C
    t = np.tanh(u, out=u)
    out_data = np.asarray(1.0 + t)
    out_data *= x.data
    out_data *= 0.5

    def backward_fn(g):
        if x.requires_grad:
            du = np.asarray(3 * 0.044715 * x2)
            du += 1.0
            du *= _GELU_C
            tmp = np.asarray(t * t)
            np.subtract(1.0, tmp, out=tmp)
            tmp *= du
            tmp *= x.data
            tmp += 1.0
            tmp += t
            tmp *= 0.5
            tmp *= g
            _accum_owned(x, tmp)

    return _make(out_data, (x,), backward_fn)


def tanh(x: Tensor) -> Tensor:
    x = astensor(x)
    t = np.tanh(x.data)

    def backward_fn(g):
        if x.requires_grad:
            tmp = np.asarray(t * t)
            np.subtract(1.0, tmp, out=tmp)
            tmp *= g
            _accum_owned(x, tmp)

    return _make(t, (x,), backward_fn)


def _gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    # row gather on the first axis with scatter-add backward
    out_data = x.data[indices]

    def backward_fn(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            np.add.at(buf, indices, g)
            _accum_owned(x, buf)

    return _make(out_data, (x,), backward_fn)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D tensor; duplicate indices scatter-add on backward."""
    x = astensor(x)
    if x.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        bad = idx[(idx < 0) | (idx >= x.shape[0])][0]
        raise IndexError(f"row index {bad} out of range [0, {x.shape[0]})")
    return _gather_rows(x, idx)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather embedding rows for a sequence of ids; empty ids give a 0 x d result."""
    table = astensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    vocab = table.shape[0]
    if ids.size:
        bad = ids[(ids < 0) | (ids >= vocab)]
        if bad.size:
            raise IndexError(f"embedding id {bad[0]} out of range [0, {vocab})")
    return _gather_rows(table, ids)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_index."""
    logits = astensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects n x V logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} targets for {n} logit rows")
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyReductionError("cross_entropy: every position is ignored")
    checked = targets[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= vocab):
        bad = checked[(checked < 0) | (checked >= vocab)][0]
        raise IndexError(f"target id {bad} out of range [0, {vocab})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.nonzero(valid)[0]
    out_data = np.asarray(-logp[rows, targets[rows]].sum() / n_valid)

    def backward_fn(g):
        if logits.requires_grad:
            d = np.zeros_like(logits.data)
            d[rows] = np.exp(logp[rows])
            d[rows, targets[rows]] -= 1.0
            d *= float(g) / n_valid
            _accum_owned(logits, d)

    return _make(out_data, (logits,), backward_fn)


def mse(pred: Tensor, target, mask) -> Tensor:
    """sum(mask * (pred - target)^2) / sum(mask); mask entries must be 0 or 1."""
    pred = astensor(pred)
    target_data = astensor(target).data
    mask_data = astensor(mask).data
    if pred.shape != target_data.shape or pred.shape != mask_data.shape:
        raise ShapeError(
            f"mse shapes disagree: pred {pred.shape}, target {target_data.shape}, mask {mask_data.shape}"
        )
    if not np.all((mask_data == 0.0) | (mask_data == 1.0)):
        raise ValueError("mse mask must contain only 0s and 1s")
    msum = mask_data.sum()
    if msum == 0:
        raise EmptyReductionError("mse: mask excludes every element")
    diff = pred.data - target_data
    out_data = np.asarray((mask_data * diff * diff).sum() / msum)

    def backward_fn(g):
        if pred.requires_grad:
            _accum_owned(pred, (2.0 * float(g) / msum) * mask_data * diff)

    return _make(out_data, (pred,), backward_fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. `rng=None` (eval mode) or p == 0 is the identity."""
    if rng is None or p == 0.0:
        return x
    keep = np.multiply(rng.random(x.shape) >= p, 1.0 / (1.0 - p), dtype=np.float64)
    return mul(x, Tensor(keep))
