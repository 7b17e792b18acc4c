"""Central-difference gradients, the independent oracle for the tape."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import NumericError
from .tensor import Tensor


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    return float(np.asarray(value, dtype=np.float64))


def finite_diff_grad(f: Callable[[Tensor], object], x, h: float = 1e-5) -> np.ndarray:
    """Per-coordinate ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    ``f`` receives a fresh :class:`Tensor` with the dtype of ``x`` and may
    return a Tensor, array or float.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    if base.dtype.kind != "f":
        base = base.astype(np.float64)
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    step = base.dtype.type(h)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = _scalar(f(Tensor(base.copy())))
        flat[i] = orig - step
        fm = _scalar(f(Tensor(base.copy())))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = np.unravel_index(i, base.shape)
            raise NumericError(f"non-finite evaluation at index {idx}", index=idx)
        # the realised step differs from h once rounded to the working precision
        width = float(orig + step) - float(orig - step)
        grad.reshape(-1)[i] = (fp - fm) / width
    return grad.astype(base.dtype)


def relative_error(analytic, numeric) -> float:
    """``|a - n| / max(|a|, |n|)`` in Frobenius norm; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
