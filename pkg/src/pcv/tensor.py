"""Dense float32 tensors with a tape-based reverse-mode autodiff.

Operations record themselves on the active :class:`GradTape` whenever one of
their inputs requires a gradient. Outside a ``with GradTape():`` block they
are plain numpy arithmetic.

    with GradTape() as tape:
        loss = nll_loss(log_softmax(matmul(x, w)), [1])
    grads = tape.backward(loss)
"""
from __future__ import annotations

import contextvars
from collections import Counter

import numpy as np

from .errors import DimensionError, DomainError, UsageError

DTYPE = np.float32

_active_tape: contextvars.ContextVar = contextvars.ContextVar("pcv_tape", default=None)


class Tensor:
    """An n-dimensional float32 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr.astype(DTYPE, copy=False)
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def size(self):
        return int(self.data.size)

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("kind", "out", "parents", "backward_fn")

    def __init__(self, kind, out, parents, backward_fn):
        self.kind = kind
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class GradTape:
    """Records differentiable operations in execution (topological) order."""

    def __init__(self):
        self.nodes = []
        self._leaves = {}
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def watch(self, tensor):
        """Mark ``tensor`` as a leaf whose gradient should be reported."""
        tensor.requires_grad = True
        self._leaves[id(tensor)] = tensor
        return tensor

    @property
    def leaves(self):
        return list(self._leaves.values())

    def op_census(self):
        return Counter(node.kind for node in self.nodes)

    def _record(self, kind, out, parents, backward_fn):
        for p in parents:
            if p.requires_grad and p._node is None:
                self._leaves.setdefault(id(p), p)
        node = _Node(kind, out, parents, backward_fn)
        out.requires_grad = True
        out._node = node
        self.nodes.append(node)

    def backward(self, root):
        """Accumulate d(root)/d(leaf) into every leaf's ``.grad``.

        Returns a dict mapping each leaf tensor to its accumulated gradient.
        """
        if not self.nodes or root._node is None or root._node not in self.nodes:
            raise UsageError("backward() needs a root produced on this tape")
        if root.size != 1:
            raise UsageError(f"backward() root must be scalar, shape is {root.shape}")
        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            g = g.astype(DTYPE, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            out[leaf] = leaf.grad
        return out

    def zero_grad(self):
        for leaf in self._leaves.values():
            leaf.grad = np.zeros_like(leaf.data)


def zero_grad(tape):
    tape.zero_grad()


def _tracking(*tensors):
    tape = _active_tape.get()
    if tape is None:
        return None
    return tape if any(t.requires_grad for t in tensors) else None


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b):
    """``a @ b`` for a of shape (..., m, k) and b of shape (k, n) or (..., k, n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = Tensor._wrap(np.matmul(a.data, b.data))
    tape = _tracking(a, b)
    if tape is not None:
        av, bv = a.data, b.data

        def backward(g):
            ga = np.matmul(g, np.swapaxes(bv, -1, -2)) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                if bv.ndim == 2:
                    gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = np.matmul(np.swapaxes(av, -1, -2), g)
            return ga, gb

        tape._record("matmul", out, (a, b), backward)
    return out


def add_bias(a, bias):
    """Add a per-channel bias of shape (c,) along the last axis of ``a``."""
    a, bias = _as_tensor(a), _as_tensor(bias)
    if bias.data.ndim != 1 or a.shape[-1] != bias.shape[0]:
        raise DimensionError(f"bias shape {bias.shape} does not fit {a.shape}")
    out = Tensor._wrap(a.data + bias.data)
    tape = _tracking(a, bias)
    if tape is not None:
        def backward(g):
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

        tape._record("add_bias", out, (a, bias), backward)
    return out


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data + b.data)
    tape = _tracking(a, b)
    if tape is not None:
        tape._record("add", out, (a, b), lambda g: (g, g))
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data * b.data)
    tape = _tracking(a, b)
    if tape is not None:
        av, bv = a.data, b.data
        tape._record("mul", out, (a, b), lambda g: (g * bv, g * av))
    return out


def reduce_sum(a):
    a = _as_tensor(a)
    out = Tensor._wrap(np.array([a.data.sum(dtype=DTYPE)]))
    tape = _tracking(a)
    if tape is not None:
        shape = a.data.shape
        tape._record("sum", out, (a,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))
    return out


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.data.shape
    try:
        arr = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    out = Tensor._wrap(arr)
    tape = _tracking(a)
    if tape is not None:
        tape._record("reshape", out, (a,), lambda g: (g.reshape(old),))
    return out


def relu(a):
    a = _as_tensor(a)
    out = Tensor._wrap(np.maximum(a.data, DTYPE(0)))
    tape = _tracking(a)
    if tape is not None:
        mask = a.data > 0
        tape._record("relu", out, (a,), lambda g: (g * mask,))
    return out


def reduce_max(a):
    """Maximum over the point axis (second to last) of a (..., n, c) tensor.

    Ties route the gradient to the lowest point index.
    """
    shape = np.shape(a.data if isinstance(a, Tensor) else a)
    if len(shape) < 2:
        raise DimensionError(f"reduce_max needs a (..., n, c) tensor, got {shape}")
    if shape[-2] < 1:
        raise DomainError("reduce_max over an empty point axis")
    a = _as_tensor(a)
    tape = _tracking(a)
    if tape is None:
        return Tensor._wrap(a.data.max(axis=-2))
    idx = np.argmax(a.data, axis=-2)
    out = Tensor._wrap(np.take_along_axis(a.data, idx[..., None, :], axis=-2)[..., 0, :])
    shape = a.data.shape

    def backward(g):
        ga = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(ga, idx[..., None, :], g[..., None, :], axis=-2)
        return (ga,)

    tape._record("reduce_max", out, (a,), backward)
    return out


def log_softmax(a):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    res = shifted - lse
    out = Tensor._wrap(res)
    tape = _tracking(a)
    if tape is not None:
        probs = np.exp(res)

        def backward(g):
            return (g - probs * g.sum(axis=-1, keepdims=True),)

        tape._record("log_softmax", out, (a,), backward)
    return out


def nll_loss(logprobs, targets):
    """Mean negative log-likelihood of ``targets`` under (b, k) log-probabilities."""
    logprobs = _as_tensor(logprobs)
    if logprobs.data.ndim != 2:
        raise DimensionError(f"nll_loss expects (b, k) log-probabilities, got {logprobs.shape}")
    b, k = logprobs.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != b:
        raise DimensionError(f"{targets.shape[0]} targets for a batch of {b}")
    if np.any(targets < 0) or np.any(targets >= k):
        raise IndexError(f"target out of range [0, {k}): {targets.tolist()}")
    rows = np.arange(b)
    picked = logprobs.data[rows, targets]
    out = Tensor._wrap(np.array([-picked.mean(dtype=np.float64)], dtype=DTYPE))
    tape = _tracking(logprobs)
    if tape is not None:
        def backward(g):
            ga = np.zeros((b, k), dtype=DTYPE)
            ga[rows, targets] = -g.reshape(()) / b
            return (ga,)

        tape._record("nll_loss", out, (logprobs,), backward)
    return out

