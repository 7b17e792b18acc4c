"""Dense tensors with a tape-based reverse-mode differentiator.

A :class:`Tensor` wraps a numpy array. Operations on tensors whose
``requires_grad`` flag is set are recorded on the innermost active
:class:`GradTape`; outside a tape every operation is a plain numpy call.

    with GradTape() as tape:
        loss = f(w)
    (gw,) = tape.gradient(loss, [w])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

_TAPES: list["GradTape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators (implemented in ops) ---------------------------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __neg__(self):
        return _ops().mul(self, -1.0)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    def __getitem__(self, key):
        return _ops().getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    @property
    def mT(self):
        """Swap the last two axes."""
        return _ops().swap_last(self)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)


def _ops():
    from . import ops

    return ops


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


class Primitive:
    """A differentiable operation.

    ``forward`` maps input arrays to ``(output, saved)``; ``backward`` maps
    the output cotangent to one cotangent (or ``None``) per input.
    """

    name = "primitive"

    def forward(self, *xs, **attrs):
        raise NotImplementedError

    def backward(self, saved, grad, *xs, **attrs):
        raise NotImplementedError


@dataclass
class TapeEntry:
    prim: Primitive
    inputs: tuple[Tensor, ...]
    attrs: dict[str, Any]
    output: Tensor
    saved: Any = field(repr=False)


class GradTape:
    """Records primitive applications for exact reverse-mode gradients."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Cotangents of ``target`` with respect to each of ``sources``.

        Sources that ``target`` does not depend on get a zero array.
        """
        grads: dict[int, np.ndarray] = {}
        if seed is None:
            seed = np.ones_like(target.data)
        grads[id(target)] = np.asarray(seed, dtype=target.dtype)
        wanted = {id(s) for s in sources}
        for entry in reversed(self.entries):
            g = grads.get(id(entry.output))
            if g is None:
                continue
            if id(entry.output) not in wanted:
                del grads[id(entry.output)]
            in_arrays = [t.data for t in entry.inputs]
            in_grads = entry.prim.backward(entry.saved, g, *in_arrays, **entry.attrs)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]

    def replay(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Re-run every recorded forward; return ``(recorded, replayed)`` pairs."""
        fresh: dict[int, np.ndarray] = {}
        pairs = []
        for entry in self.entries:
            xs = [fresh.get(id(t), t.data) for t in entry.inputs]
            out, _ = entry.prim.forward(*xs, **entry.attrs)
            fresh[id(entry.output)] = out
            pairs.append((entry.output.data, out))
        return pairs


def current_tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


def apply(prim: Primitive, *inputs, **attrs) -> Tensor:
    tensors = tuple(as_tensor(x) for x in inputs)
    out, saved = prim.forward(*(t.data for t in tensors), **attrs)
    result = Tensor(out)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        result.requires_grad = True
        tape.record(TapeEntry(prim, tensors, attrs, result, saved))
    return result
