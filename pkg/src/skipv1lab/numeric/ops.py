"""Differentiable primitives.

Tensors follow the column convention: a sequence of ``n`` tokens with ``d``
features is a ``(..., d, n)`` array, so projections are left-multiplications
``W @ X`` and attention scores are ``K^T Q`` with keys on rows and queries on
columns.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import DimensionError, ConfigurationError
from .tensor import Primitive, Tensor, apply, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the tensor's precision instead of promoting it
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise arithmetic


class _Add(Primitive):
    name = "add"

    def forward(self, a, b):
        return a + b, None

    def backward(self, saved, g, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class _Sub(Primitive):
    name = "sub"

    def forward(self, a, b):
        return a - b, None

    def backward(self, saved, g, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class _Mul(Primitive):
    name = "mul"

    def forward(self, a, b):
        return a * b, None

    def backward(self, saved, g, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class _Div(Primitive):
    name = "div"

    def forward(self, a, b):
        return a / b, None

    def backward(self, saved, g, a, b):
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


_ADD, _SUB, _MUL, _DIV = _Add(), _Sub(), _Mul(), _Div()


def add(a, b) -> Tensor:
    return apply(_ADD, *_coerce(a, b))


def sub(a, b) -> Tensor:
    return apply(_SUB, *_coerce(a, b))


def mul(a, b) -> Tensor:
    return apply(_MUL, *_coerce(a, b))


def div(a, b) -> Tensor:
    return apply(_DIV, *_coerce(a, b))


class _ReLU(Primitive):
    name = "relu"

    def forward(self, x):
        return np.maximum(x, 0), None

    def backward(self, saved, g, x):
        return (g * (x > 0),)


class _Exp(Primitive):
    name = "exp"

    def forward(self, x):
        y = np.exp(x)
        return y, y

    def backward(self, y, g, x):
        return (g * y,)


class _Log(Primitive):
    name = "log"

    def forward(self, x):
        return np.log(x), None

    def backward(self, saved, g, x):
        return (g / x,)


_RELU, _EXP, _LOG = _ReLU(), _Exp(), _Log()


def relu(x) -> Tensor:
    return apply(_RELU, x)


def exp(x) -> Tensor:
    return apply(_EXP, x)


def log(x) -> Tensor:
    return apply(_LOG, x)


def square(x) -> Tensor:
    x = as_tensor(x)
    return mul(x, x)


# ---------------------------------------------------------------------------
# matrix product


class _MatMul(Primitive):
    name = "matmul"

    def forward(self, a, b):
        return np.matmul(a, b), None

    def backward(self, saved, g, a, b):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


_MATMUL = _MatMul()


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents disagree: {a.shape} x {b.shape}") from None
    return apply(_MATMUL, a, b)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


class _Sum(Primitive):
    name = "sum"

    def forward(self, x, axis=None, keepdims=False):
        return np.sum(x, axis=axis, keepdims=keepdims), None

    def backward(self, saved, g, x, axis=None, keepdims=False):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)


class _Reshape(Primitive):
    name = "reshape"

    def forward(self, x, shape=()):
        return np.reshape(x, shape), None

    def backward(self, saved, g, x, shape=()):
        return (np.reshape(g, x.shape),)


class _Transpose(Primitive):
    name = "transpose"

    def forward(self, x, axes=None):
        return np.transpose(x, axes), None

    def backward(self, saved, g, x, axes=None):
        if axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(axes)),)


class _GetItem(Primitive):
    name = "getitem"

    def forward(self, x, key=None):
        return x[key], None

    def backward(self, saved, g, x, key=None):
        out = np.zeros_like(x)
        out[key] += g
        return (out,)


class _Take(Primitive):
    name = "take"

    def forward(self, x, indices=None, axis=0):
        return np.take(x, indices, axis=axis), None

    def backward(self, saved, g, x, indices=None, axis=0):
        axis = axis % x.ndim
        idx = np.asarray(indices)
        out = np.zeros_like(x)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (out,)


class _Concat(Primitive):
    name = "concat"

    def forward(self, *xs, axis=0):
        return np.concatenate(xs, axis=axis), None

    def backward(self, saved, g, *xs, axis=0):
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, bounds, axis=axis))


_SUM, _RESHAPE, _TRANSPOSE, _GETITEM, _TAKE, _CONCAT = (
    _Sum(), _Reshape(), _Transpose(), _GetItem(), _Take(), _Concat())


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    if isinstance(axis, list):
        axis = tuple(axis)
    return apply(_SUM, x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    return apply(_RESHAPE, x, shape=tuple(shape))


def transpose(x, axes=None) -> Tensor:
    return apply(_TRANSPOSE, x, axes=None if axes is None else tuple(axes))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x, key) -> Tensor:
    return apply(_GETITEM, x, key=key)


def take(x, indices, axis=0) -> Tensor:
    return apply(_TAKE, x, indices=np.asarray(indices, dtype=np.intp), axis=axis)


def concat(xs: Sequence, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    return apply(_CONCAT, *xs, axis=axis)


# ---------------------------------------------------------------------------
# attention, normalisation, loss


class _CausalSoftmax(Primitive):
    name = "causal_softmax"

    def forward(self, s, scale=1.0, past=0):
        nk, nq = s.shape[-2], s.shape[-1]
        z = s * s.dtype.type(scale)
        mask = np.arange(nk)[:, None] > (np.arange(nq)[None, :] + past)
        if mask.any():
            z = np.where(mask, -np.inf, z)
        z = z - z.max(axis=-2, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-2, keepdims=True)
        return p, p

    def backward(self, p, g, s, scale=1.0, past=0):
        inner = (g * p).sum(axis=-2, keepdims=True)
        return ((p * (g - inner)) * s.dtype.type(scale),)


_CAUSAL_SOFTMAX = _CausalSoftmax()


def causal_softmax(scores, scale: float = 1.0, past: int = 0) -> Tensor:
    """Column-wise softmax of ``scale * scores`` under a causal mask.

    ``scores[..., i, j]`` is the logit of key ``i`` for query ``j``. Query ``j``
    sits at absolute position ``past + j`` and sees keys ``0 .. past + j``;
    the key extent must therefore be ``past + n_queries``. Masked entries
    are exactly zero.
    """
    scores = as_tensor(scores)
    if scores.ndim < 2:
        raise DimensionError(f"causal_softmax needs a matrix, got shape {scores.shape}")
    nk, nq = scores.shape[-2:]
    if nk != nq + past:
        raise DimensionError(
            f"causal_softmax expects {nq + past} key rows for {nq} queries after {past} cached, "
            f"got shape {scores.shape}")
    if not scale > 0:
        raise ConfigurationError(f"softmax scale must be positive, got {scale}")
    return apply(_CAUSAL_SOFTMAX, scores, scale=float(scale), past=int(past))


class _LayerNorm(Primitive):
    name = "layer_norm"

    def forward(self, x, gain, bias, eps=1e-5, axis=-1):
        shape = [1] * x.ndim
        shape[axis] = x.shape[axis]
        mu = x.mean(axis=axis, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axis, keepdims=True)
        inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = xc * inv
        out = xhat * gain.reshape(shape) + bias.reshape(shape)
        return out, (xhat, inv, shape)

    def backward(self, saved, g, x, gain, bias, eps=1e-5, axis=-1):
        xhat, inv, shape = saved
        other = tuple(i for i in range(x.ndim) if i != axis % x.ndim)
        dgain = (g * xhat).sum(axis=other).reshape(gain.shape)
        dbias = g.sum(axis=other).reshape(bias.shape)
        dxhat = g * gain.reshape(shape)
        dx = inv * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        return dx, dgain, dbias


_LAYER_NORM = _LayerNorm()


def layer_norm(x, gain, bias, eps: float = 1e-5, axis: int | None = None) -> Tensor:
    """Normalise to zero mean / unit variance along the feature axis, then scale and shift.

    The feature axis defaults to ``-2`` for ``(..., d, n)`` inputs and ``-1``
    for plain vectors.
    """
    x = as_tensor(x)
    if axis is None:
        axis = -2 if x.ndim >= 2 else -1
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("layer_norm of an empty feature axis")
    if not eps > 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
    gain, bias = as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[axis],) or bias.shape != (x.shape[axis],):
        raise DimensionError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match feature extent {x.shape[axis]}")
    return apply(_LAYER_NORM, x, gain, bias, eps=float(eps), axis=axis % x.ndim)


class _CrossEntropy(Primitive):
    name = "cross_entropy"

    def forward(self, logits, targets=None):
        z = logits - logits.max(axis=-2, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-2, keepdims=True))
        logp = z - lse
        picked = np.take_along_axis(logp, targets[..., None, :], axis=-2)
        # accumulate the mean in float64 so the scalar is order-stable
        loss = -picked.astype(np.float64).mean()
        return np.asarray(loss, dtype=logits.dtype), logp

    def backward(self, logp, g, logits, targets=None):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, targets[..., None, :], 1.0, axis=-2)
        count = targets.size
        return ((grad - onehot) * (g / count),)


_CROSS_ENTROPY = _CrossEntropy()


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-softmax of the target entries.

    ``logits`` is ``(..., V, n)`` (vocabulary on the row axis) and
    ``targets`` holds integer ids of shape ``(..., n)``.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if targets.dtype.kind not in "iu":
        raise DimensionError(f"targets must be integer ids, got dtype {targets.dtype}")
    if logits.ndim < 2 or targets.shape != logits.shape[:-2] + logits.shape[-1:]:
        raise DimensionError(f"logits {logits.shape} incompatible with targets {targets.shape}")
    vocab = logits.shape[-2]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        bad = int(targets.max() if targets.max() >= vocab else targets.min())
        raise IndexError(f"target id {bad} outside vocabulary of size {vocab}")
    return apply(_CROSS_ENTROPY, logits, targets=targets.astype(np.intp))


class _Rope(Primitive):
    name = "rope"

    def forward(self, x, positions=None, base=10000.0):
        cos, sin = _rope_tables(x.shape[-2], positions, base, x.dtype)
        return _rotate(x, cos, sin), None

    def backward(self, saved, g, x, positions=None, base=10000.0):
        cos, sin = _rope_tables(x.shape[-2], positions, base, x.dtype)
        return (_rotate(g, cos, -sin),)


def _rope_tables(dim, positions, base, dtype):
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / dim)
    angles = freqs[:, None] * np.asarray(positions, dtype=np.float64)[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rotate(x, cos, sin):
    even, odd = x[..., 0::2, :], x[..., 1::2, :]
    out = np.empty_like(x)
    out[..., 0::2, :] = even * cos - odd * sin
    out[..., 1::2, :] = even * sin + odd * cos
    return out


_ROPE = _Rope()


def rope(x, positions, base: float = 10000.0) -> Tensor:
    """Rotary position embedding on the feature axis ``-2`` of ``(..., dim, n)``."""
    x = as_tensor(x)
    positions = np.asarray(positions)
    if x.shape[-2] % 2:
        raise DimensionError(f"rope needs an even feature extent, got {x.shape[-2]}")
    if positions.shape != (x.shape[-1],):
        raise DimensionError(f"rope positions {positions.shape} do not match sequence extent {x.shape[-1]}")
    return apply(_ROPE, x, positions=positions, base=float(base))


def softmax_scale(head_dim: int) -> float:
    return 1.0 / math.sqrt(head_dim)
