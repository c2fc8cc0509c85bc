"""Differentiable primitives.

Exactly the operations the sequence model and the graph encoder need:
matmul/linear, elementwise arithmetic, embedding lookup, masked softmax,
RMS normalization, rotary rotation, SiLU/ReLU, head reshaping, dropout,
and the loss heads (token cross-entropy with ignore-index, logistic loss).
Every primitive defines its own backward closure and is finite-difference
checked in the test suite.
"""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, current_tape, finite_checks_enabled

__all__ = [
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "embedding_lookup",
    "masked_softmax",
    "rms_norm",
    "rotary_rotate",
    "silu",
    "relu",
    "reshape",
    "transpose",
    "repeat_heads",
    "dropout",
    "cross_entropy",
    "bce_with_logits",
    "sum_",
    "mean_",
]


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    grad = _unbroadcast(grad, t.data.shape)
    if t.grad is None:
        t.grad = grad.astype(t.data.dtype, copy=True)
    else:
        t.grad += grad


def _make(name: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if finite_checks_enabled() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {name}")
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    tape = current_tape()
    if out.requires_grad and tape is not None:
        out._backward = backward
        out._parents = parents
        tape.record(out)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make("mul", a.data * b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _make("neg", -a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.swapaxes(-1, -2))
        _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    return _make("matmul", a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T for a 2-D weight of shape (out_features, in_features)."""
    if w.ndim != 2:
        raise ShapeError("linear weight must be 2-D")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear shapes incompatible: {x.shape} with weight {w.shape}")

    def backward(g):
        _accumulate(x, g @ w.data)
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.data.reshape(-1, w.shape[1])
        _accumulate(w, g2.T @ x2)

    return _make("linear", x.data @ w.data.T, (x, w), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding id out of range")

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            _accumulate(table, gt)

    return _make("embedding_lookup", table.data[ids], (table,), backward)


def masked_softmax(x: Tensor, allow_mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to allowed positions.

    Disallowed positions get probability exactly 0. Every row must allow at
    least one position.
    """
    mask = np.broadcast_to(np.asarray(allow_mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise ShapeError("masked_softmax: some row has no allowed entries")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(x, s * (g - inner))

    return _make("masked_softmax", s, (x,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x scaled to unit root-mean-square over the last axis, times `gain`."""
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rms_norm gain shape {gain.shape} does not match feature dim {x.shape[-1]}")
    d = x.shape[-1]
    r = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    y = x.data / r * gain.data

    def backward(g):
        u = g * gain.data
        _accumulate(x, u / r - x.data * ((u * x.data).sum(axis=-1, keepdims=True) / (d * r**3)))
        gg = (g * x.data / r).reshape(-1, d).sum(axis=0)
        _accumulate(gain, gg)

    return _make("rms_norm", y, (x, gain), backward)


def _rope_angles(positions: np.ndarray, half: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / (2 * half))
    ang = positions.astype(np.float64)[:, None] * inv_freq[None, :]  # (T, half)
    return np.cos(ang).astype(dtype)[:, None, :], np.sin(ang).astype(dtype)[:, None, :]


def rotary_rotate(x: Tensor, positions, base: float = 10_000.0) -> Tensor:
    """Rotary position rotation of shape (..., T, heads, head_dim).

    Each even/odd feature pair is rotated by pos * base^(-2i/head_dim);
    rotation is orthogonal so per-pair norms are preserved.
    """
    dh = x.shape[-1]
    if dh % 2:
        raise ShapeError("rotary head dim must be even")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[-3],):
        raise ShapeError("positions must match the sequence axis")
    cos, sin = _rope_angles(positions, dh // 2, base, x.dtype)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    y = np.empty_like(x.data)
    y[..., 0::2] = xe * cos - xo * sin
    y[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        _accumulate(x, gx)

    return _make("rotary_rotate", y, (x,), backward)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        _accumulate(x, g * s * (1.0 + x.data * (1.0 - s)))

    return _make("silu", x.data * s, (x,), backward)


def relu(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _make("relu", np.maximum(x.data, 0), (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make("reshape", x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _make("transpose", x.data.transpose(axes), (x,), backward)


def repeat_heads(x: Tensor, repeats: int) -> Tensor:
    """Repeat the head axis (-2) so grouped KV heads align with query heads."""
    if repeats == 1:
        return x

    def backward(g):
        shape = g.shape[:-2] + (x.shape[-2], repeats, g.shape[-1])
        _accumulate(x, g.reshape(shape).sum(axis=-2))

    return _make("repeat_heads", np.repeat(x.data, repeats, axis=-2), (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; the identity when train is False or p == 0."""
    if not train or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def backward(g):
        _accumulate(x, g * keep)

    return _make("dropout", x.data * keep, (x,), backward)


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean next-token negative log-likelihood over non-ignored targets.

    logits: (N, V); targets: (N,) integer ids. Positions whose target equals
    ignore_index contribute nothing to the loss or the gradient.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy shapes: {logits.shape} vs targets {targets.shape}")
    valid = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: every target is ignored (all-pad batch)")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    safe_targets = np.where(valid, targets, 0)
    nll = lse - z[np.arange(len(targets)), safe_targets]
    loss = nll[valid].mean()

    def backward(g):
        p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        p[np.arange(len(targets)), safe_targets] -= 1.0
        p[~valid] = 0.0
        _accumulate(logits, p * (float(g) / n_valid))

    return _make("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def bce_with_logits(scores: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on raw scores (numerically stable form)."""
    y = np.asarray(labels, dtype=scores.dtype)
    if y.shape != scores.shape:
        raise ShapeError(f"bce shapes differ: {scores.shape} vs {y.shape}")
    s = scores.data
    loss = (np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))).mean()
    n = s.size

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-s))
        _accumulate(scores, (sig - y) * (float(g) / n))

    return _make("bce_with_logits", np.asarray(loss, dtype=scores.dtype), (scores,), backward)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make("sum", x.data.sum(axis=axis), (x,), backward)


def mean_(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape) / n)
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape) / n)

    return _make("mean", x.data.mean(axis=axis), (x,), backward)


# Operator sugar; kept thin so the op functions stay the single source of truth.
Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__neg__ = lambda self: neg(self)
