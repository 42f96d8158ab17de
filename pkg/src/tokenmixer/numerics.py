"""Minimal dense-tensor substrate with reverse-mode differentiation.

Arrays are numpy (float32 by default, float64 under ``precision("float64")``
for verification). Every op records a backward closure on its output; calling
:func:`backward` on a scalar walks the tape and accumulates gradients into the
participating :class:`Parameter` values. :func:`grad_check` is the independent
central-difference oracle against that tape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

MASK_VALUE = -1e9  # additive mask surrogate for "drop this key/candidate"
_MASK_DROP_THRESHOLD = -1e8

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(name):
    """Run the enclosed block with a different default dtype ("float32"/"float64")."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = {"float32": np.float32, "float64": np.float64}[name]
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array plus optional tape bookkeeping.

    Immutable after construction except for gradient accumulation in ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not an op; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named trainable tensor. Names must be unique within one model."""

    __slots__ = ("value", "name")

    def __init__(self, data, name):
        arr = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.value = Tensor(arr, requires_grad=True)
        self.name = name

    @property
    def grad(self):
        return self.value.grad

    def zero_grad(self):
        self.value.grad = None

    def assign(self, data):
        """In-place value replacement (optimizer step). Caller serializes access."""
        self.value.data = np.asarray(data, dtype=self.value.data.dtype)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass(frozen=True)
class RngState:
    """Seed plus algorithm id; all randomness derives generators from this.

    ``stream(*ids)`` returns an independent PCG64 generator keyed by
    (seed, *ids); identical seed and call sequence give identical streams.
    """

    seed: int
    algorithm: str = "pcg64"

    def stream(self, *ids):
        if self.algorithm != "pcg64":
            raise ValueError(f"unknown rng algorithm {self.algorithm!r}")
        return np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, *ids])


# Stream domain tags (second entry of the seed sequence).
RNG_INIT = 1
RNG_DATA = 2
RNG_STEP = 3
RNG_SAMPLE = 4
RNG_EVAL = 5


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _accum(t, g):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def neg(a):
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make(-a.data, (a,), bw)


def matmul(a, b):
    """Matrix product with numpy batching semantics (both operands ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _make(out_data, (a, b), bw)


def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), bw)


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    out_data = a.data.transpose(axes)

    def bw(g):
        if a.requires_grad:
            _accum(a, g.transpose(inv))

    return _make(out_data, (a,), bw)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), bw)


def stack(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        for t, gp in zip(tensors, parts):
            if t.requires_grad:
                _accum(t, gp)

    return _make(out_data, tuple(tensors), bw)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = a.data[idx]

    def bw(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[idx] = g
            _accum(a, ga)

    return _make(out_data, (a,), bw)


def embedding(table, ids):
    """Row gather from a (V, D) table; ids is an integer ndarray of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def bw(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            _accum(table, gt)

    return _make(out_data, (table,), bw)


def relu(a):
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0))

    return _make(out_data, (a,), bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh-approximated GELU; smooth, so finite differences agree everywhere."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out_data = 0.5 * x * (1.0 + t)

    def bw(g):
        if a.requires_grad:
            d_inner = _GELU_C * (1.0 + 0.134145 * x2)
            _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * ((1.0 - t * t) * d_inner)))

    return _make(out_data, (a,), bw)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if a.requires_grad:
            if axis is None:
                _accum(a, np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def detach(a):
    """Stop-gradient: same values, no tape history."""
    return Tensor(as_tensor(a).data)


def override_value(source, data):
    """A node carrying ``data`` whose gradient passes to ``source`` unchanged.

    This is the straight-through wiring: forward sees the replacement values
    exactly, backward treats the replacement as the identity map of source.
    """
    source = as_tensor(source)
    data = np.asarray(data, dtype=source.dtype)
    if data.shape != source.data.shape:
        raise ValueError(f"override shape {data.shape} != source shape {source.data.shape}")

    def bw(g):
        if source.requires_grad:
            _accum(source, g)

    return _make(data, (source,), bw)


def softmax(x, axis=-1):
    """Probability-normalize slices along ``axis``, stabilized by max subtraction."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            gx = out_data * (g - (g * out_data).sum(axis=axis, keepdims=True))
            _accum(x, gx)

    return _make(out_data, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Zero-mean unit-variance over the last axis, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, xhat.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    return _make(out_data, (x, gain, bias), bw)


def causal_mask(n, dtype=None):
    """(n, n) additive mask: 0 on and below the diagonal, MASK_VALUE above."""
    m = np.triu(np.full((n, n), MASK_VALUE, dtype=dtype or _DEFAULT_DTYPE), k=1)
    return Tensor(m)


def attention(q, k, v, mask=None, heads=1, return_weights=False):
    """softmax(Q K^T / sqrt(D) + mask) V.

    Q is (..., Lq, D); K and V are (..., Lk, D). ``mask`` is additive
    (0 keep, MASK_VALUE drop) and broadcastable to (..., Lq, Lk). With
    ``heads`` > 1, D splits into per-head slices that attend independently
    and concatenate back. A mask row dropping every key is an error.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if mask is not None:
        mask = as_tensor(mask)
        dropped = mask.data <= _MASK_DROP_THRESHOLD
        if np.any(dropped.all(axis=-1)):
            raise ValueError("fully masked attention row")
    if heads > 1:
        d = q.data.shape[-1]
        if d % heads:
            raise ValueError(f"feature dim {d} not divisible by {heads} heads")
        hd = d // heads

        def split(t):
            lead = t.data.shape[:-2]
            n = t.data.shape[-2]
            t = reshape(t, lead + (n, heads, hd))
            axes = tuple(range(len(lead))) + (t.ndim - 2, t.ndim - 3, t.ndim - 1)
            return transpose(t, axes)

        qh, kh, vh = split(q), split(k), split(v)
        hmask = None
        if mask is not None:
            hmask = reshape(mask, mask.data.shape[:-2] + (1,) + mask.data.shape[-2:])
        out, w = _attention_core(qh, kh, vh, hmask)
        lead = q.data.shape[:-2]
        axes = tuple(range(len(lead))) + (out.ndim - 2, out.ndim - 3, out.ndim - 1)
        out = reshape(transpose(out, axes), q.data.shape)
        return (out, w) if return_weights else out
    out, w = _attention_core(q, k, v, mask)
    return (out, w) if return_weights else out


def _attention_core(q, k, v, mask):
    scale = 1.0 / np.sqrt(q.data.shape[-1])
    scores = mul(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), scale)
    if mask is not None:
        scores = add(scores, mask)
    w = softmax(scores, axis=-1)
    return matmul(w, v), w


def cross_entropy_from_logits(logits, targets):
    """Mean over positions of -log softmax(logits)[target], in nats per token."""
    logits = as_tensor(logits)
    vocab = logits.data.shape[-1]
    targets = np.asarray(targets).reshape(-1)
    flat = logits.data.reshape(-1, vocab)
    if targets.shape[0] != flat.shape[0]:
        raise ValueError(f"targets length {targets.shape[0]} != positions {flat.shape[0]}")
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"target id out of range for vocab {vocab}")
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1))
    ll = z[np.arange(flat.shape[0]), targets] - lse
    out_data = np.asarray(-ll.mean(), dtype=logits.dtype)

    def bw(g):
        if logits.requires_grad:
            p = np.exp(z - lse[:, None])
            p[np.arange(flat.shape[0]), targets] -= 1.0
            _accum(logits, (g * p / flat.shape[0]).reshape(logits.data.shape))

    return _make(out_data, (logits,), bw)


def backward(loss):
    """Reverse-mode sweep from a scalar; accumulates into reachable grads."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f, params, h=1e-4):
    """Central-difference oracle vs the tape, in 64-bit mode.

    ``f`` rebuilds its graph from the live parameter values and returns a
    scalar Tensor. Returns the max over coordinates of
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    saved = [(p, p.value.data) for p in params]
    for p, d in saved:
        p.value.data = d.astype(np.float64)
    try:
        with precision("float64"):
            for p in params:
                p.zero_grad()
            backward(f())
            ad = [np.zeros_like(p.value.data) if p.grad is None else p.grad.copy() for p in params]
            max_err = 0.0
            with no_grad():
                for p, ga in zip(params, ad):
                    d = p.value.data
                    flat = d.reshape(-1)
                    gflat = ga.reshape(-1)
                    for i in range(flat.shape[0]):
                        orig = flat[i]
                        flat[i] = orig + h
                        f_plus = f().item()
                        flat[i] = orig - h
                        f_minus = f().item()
                        flat[i] = orig
                        g_fd = (f_plus - f_minus) / (2.0 * h)
                        err = abs(gflat[i] - g_fd) / max(1e-8, abs(gflat[i]) + abs(g_fd))
                        if err > max_err:
                            max_err = err
    finally:
        for p, d in saved:
            p.value.data = d
            p.zero_grad()
    return max_err
