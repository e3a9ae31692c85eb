"""Minimal reverse-mode autodiff over dense float64 arrays.

A deliberately small, closed op set: matmul, add (broadcasting), mul
(broadcasting), scale, concat, basic slicing, gather, reshape, leaky_relu,
masked_softmax, mean, cross_entropy. Each op records a backward rule on a
per-forward tape; `backward()` walks the tape once in reverse topological
order. Gradients are accumulated in a tape-local dict so forward/backward
passes over shared (read-only) parameters can run on parallel threads; the
returned dict is what the optimizer consumes.

Float64 throughout: the finite-difference checker needs the headroom.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "constant",
    "parameter",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "concat",
    "gather",
    "reshape",
    "leaky_relu",
    "masked_softmax",
    "mean",
    "cross_entropy",
    "AdamState",
    "adam_step",
    "finite_diff_check",
]


class Tensor:
    """A value plus its tape node: data, gradient slot, and parent links.

    Tensors are immutable after construction (the optimizer mutates
    parameter `.data` in place between tapes, never during one).
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=()):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor holds non-finite values (NaN/Inf)")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def item(self) -> float:
        return float(self.data)

    def backward(self, write_grad=True):
        """Reverse-mode pass from this scalar tensor.

        Returns a dict mapping every reachable leaf with requires_grad to
        its gradient array. When ``write_grad`` each visited tensor also
        gets `.grad` set (single-threaded convenience); pass False when
        running tapes concurrently over shared parameters.
        """
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar tensor")
        order = _toposort(self)
        acc = {id(self): np.ones_like(self.data)}
        leaves = {}
        for node in order:  # reverse topological: outputs before inputs
            g = acc.pop(id(node), None)
            if g is None:
                continue
            if write_grad:
                node.grad = g
            if node._backward is not None:
                node._backward(g, acc)
            elif node.requires_grad:
                leaves[node] = g
        return leaves


def _toposort(root):
    """Iterative DFS postorder, reversed: each node visited exactly once."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def _accum(acc, node, g):
    key = id(node)
    if key in acc:
        acc[key] = acc[key] + g
    else:
        acc[key] = g


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad,
                 parents=(a, b))

    def _backward(g, acc):
        if a.requires_grad:
            _accum(acc, a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(acc, b, _unbroadcast(g, b.data.shape))

    out._backward = _backward
    return out


def sub(a, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product; either side may be a constant."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad,
                 parents=(a, b))

    def _backward(g, acc):
        if a.requires_grad:
            _accum(acc, a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(acc, b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = _backward
    return out


def scale(t, s: float) -> Tensor:
    t = as_tensor(t)
    s = float(s)
    out = Tensor(t.data * s, requires_grad=t.requires_grad, parents=(t,))

    def _backward(g, acc):
        if t.requires_grad:
            _accum(acc, t, g * s)

    out._backward = _backward
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad,
                 parents=(a, b))

    def _backward(g, acc):
        if a.requires_grad:
            _accum(acc, a, g @ b.data.T)
        if b.requires_grad:
            _accum(acc, b, a.data.T @ g)

    out._backward = _backward
    return out


def concat(parts, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 requires_grad=any(p.requires_grad for p in parts),
                 parents=tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _backward(g, acc):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(acc, p, g[tuple(idx)])

    out._backward = _backward
    return out


def _getitem(t, key) -> Tensor:
    t = as_tensor(t)
    out = Tensor(t.data[key], requires_grad=t.requires_grad, parents=(t,))

    def _backward(g, acc):
        if t.requires_grad:
            gi = np.zeros_like(t.data)
            gi[key] += g
            _accum(acc, t, gi)

    out._backward = _backward
    return out


def gather(t, flat_index, out_shape) -> Tensor:
    """Take ``t.flat[flat_index]`` reshaped to ``out_shape``.

    The index array is a constant; backward scatter-adds. Used for
    im2col-style rearrangement in the convolutional encoder.
    """
    t = as_tensor(t)
    idx = np.asarray(flat_index, dtype=np.intp)
    out = Tensor(t.data.reshape(-1)[idx].reshape(out_shape),
                 requires_grad=t.requires_grad, parents=(t,))

    def _backward(g, acc):
        if t.requires_grad:
            gi = np.zeros(t.data.size)
            np.add.at(gi, idx.reshape(-1), g.reshape(-1))
            _accum(acc, t, gi.reshape(t.data.shape))

    out._backward = _backward
    return out


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    out = Tensor(t.data.reshape(shape), requires_grad=t.requires_grad, parents=(t,))

    def _backward(g, acc):
        if t.requires_grad:
            _accum(acc, t, g.reshape(t.data.shape))

    out._backward = _backward
    return out


def leaky_relu(t, slope=0.2) -> Tensor:
    t = as_tensor(t)
    gate = np.where(t.data > 0, 1.0, slope)
    out = Tensor(t.data * gate, requires_grad=t.requires_grad, parents=(t,))

    def _backward(g, acc):
        if t.requires_grad:
            _accum(acc, t, g * gate)

    out._backward = _backward
    return out


def masked_softmax(scores, support) -> Tensor:
    """Row-wise softmax over the entries flagged by the boolean ``support``.

    Unsupported entries come out exactly zero. A row with empty support
    becomes all-zero and raises a warning (isolated node). Numerically
    stable via per-row max subtraction over the supported entries.
    """
    scores = as_tensor(scores)
    mask = np.asarray(support, dtype=bool)
    if mask.shape != scores.data.shape:
        raise ValueError("support mask shape must match scores")
    nonempty = mask.any(axis=-1, keepdims=True)
    if not nonempty.all():
        warnings.warn("masked_softmax: row(s) with empty support yield all-zero "
                      "rows (isolated nodes)", RuntimeWarning, stacklevel=2)
    neg = np.where(mask, scores.data, -np.inf)
    rowmax = np.where(nonempty, np.max(neg, axis=-1, keepdims=True), 0.0)
    expd = np.where(mask, np.exp(np.where(mask, scores.data - rowmax, 0.0)), 0.0)
    denom = expd.sum(axis=-1, keepdims=True)
    denom = np.where(nonempty, denom, 1.0)
    soft = expd / denom
    out = Tensor(soft, requires_grad=scores.requires_grad, parents=(scores,))

    def _backward(g, acc):
        if scores.requires_grad:
            dot = (g * soft).sum(axis=-1, keepdims=True)
            _accum(acc, scores, soft * (g - dot))

    out._backward = _backward
    return out


def mean(t, axis=None, keepdims=False) -> Tensor:
    t = as_tensor(t)
    out_data = t.data.mean(axis=axis, keepdims=keepdims)
    out = Tensor(out_data, requires_grad=t.requires_grad, parents=(t,))
    count = t.data.size if axis is None else t.data.shape[axis]

    def _backward(g, acc):
        if t.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(acc, t, np.broadcast_to(g, t.data.shape) / count)

    out._backward = _backward
    return out


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax of the true class over a batch.

    ``logits`` is (B, 2); ``labels`` an int sequence of 0/1. The gradient
    is (softmax - onehot) / B.
    """
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or logits.data.shape[1] != 2:
        raise ValueError("cross_entropy expects (B, 2) logits")
    if y.shape != (logits.data.shape[0],):
        raise ValueError("labels length must match the batch")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - z[np.arange(len(y)), y]
    out = Tensor(losses.mean(), requires_grad=logits.requires_grad, parents=(logits,))

    def _backward(g, acc):
        if logits.requires_grad:
            soft = np.exp(z - zmax)
            soft /= soft.sum(axis=1, keepdims=True)
            soft[np.arange(len(y)), y] -= 1.0
            _accum(acc, logits, float(g) * soft / len(y))

    out._backward = _backward
    return out


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain (non-differentiable) row softmax for inference-side scoring."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One Adam update with bias correction, in place on ``params`` data.

    ``params`` maps name -> Tensor, ``grads`` name -> array (missing names
    are treated as zero gradient). Any NaN/Inf gradient rejects the whole
    step before touching state.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}; step rejected")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# Gradient verification


def finite_diff_check(f, params, h=1e-5):
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` is a deterministic zero-argument callable returning a scalar
    Tensor computed from ``params`` (dict name -> Tensor). Relative error
    per coordinate is |a - b| / max(|a|, |b|, 1e-12).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3] for float64")
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise ValueError("objective returned a non-finite value")
    grads = out.backward(write_grad=False)
    by_name = {name: grads.get(p, np.zeros_like(p.data)) for name, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = by_name[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            a, b = gflat[i], fd
            err = abs(a - b) / max(abs(a), abs(b), 1e-12)
            if err > worst:
                worst = err
    return worst
