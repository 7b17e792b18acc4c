"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numpy as np

from .errors import DimensionError


def check_token_array(X, vocab_size: int | None = None, max_len: int | None = None) -> np.ndarray:
    """Integer token ids as an ``int64`` array of rank 1 or 2."""
    arr = np.asarray(X)
    if arr.dtype.kind not in "iu":
        if arr.dtype.kind == "f" and arr.size and np.all(arr == np.round(arr)):
            arr = arr.astype(np.int64)
        else:
            raise DimensionError(f"token ids must be integers, got dtype {arr.dtype}")
    if arr.ndim not in (1, 2) or arr.shape[-1] == 0:
        raise DimensionError(f"expected a non-empty (n,) or (batch, n) array, got shape {arr.shape}")
    if vocab_size is not None and (arr.min() < 0 or arr.max() >= vocab_size):
        raise IndexError(f"token id outside vocabulary of size {vocab_size}")
    if max_len is not None and arr.shape[-1] > max_len:
        raise DimensionError(f"sequence length {arr.shape[-1]} exceeds {max_len}")
    return arr.astype(np.int64)

