"""Byte-level corpus ingestion, train/validation split and window sampling."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ..errors import ConfigurationError, DataError

VOCAB_SIZE = 256
CHUNK = 256
# irrational phase keeps the split pattern aperiodic
_PHASE = (math.sqrt(5.0) - 1.0) / 2.0


def bundled_corpus_path() -> str:
    return str(resources.files("skipv1lab").joinpath("data/corpus.txt"))


def encode(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def decode(tokens) -> str:
    return bytes(np.asarray(tokens, dtype=np.uint8).tolist()).decode("utf-8", errors="replace")


def validation_chunks(n_chunks: int, fraction: float) -> np.ndarray:
    """Boolean mask over chunks: chunk ``k`` is held out iff
    ``floor((k+1) f + s) > floor(k f + s)``.

    The count of held-out chunks among the first ``m`` never differs from
    ``m f`` by more than one, so the split fraction is exact up to a chunk.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError(f"validation fraction must lie in [0, 1), got {fraction}")
    k = np.arange(n_chunks, dtype=np.float64)
    return np.floor((k + 1) * fraction + _PHASE) > np.floor(k * fraction + _PHASE)


@dataclass
class Corpus:
    tokens: np.ndarray
    val_fraction: float = 0.1
    chunk: int = CHUNK

    def __post_init__(self):
        if self.tokens.size == 0:
            raise DataError("corpus is empty")
        if self.chunk < 2:
            raise ConfigurationError("chunk size must be at least 2")
        n_chunks = -(-self.tokens.size // self.chunk)
        self.val_chunk_mask = validation_chunks(n_chunks, self.val_fraction)

    @property
    def n_chunks(self) -> int:
        return self.val_chunk_mask.size

    def split_mask(self) -> np.ndarray:
        """Per-token boolean mask, True for validation positions."""
        return np.repeat(self.val_chunk_mask, self.chunk)[: self.tokens.size]

    def chunks(self, split: str) -> np.ndarray:
        if split not in ("train", "val"):
            raise ConfigurationError(f"split must be 'train' or 'val', got {split!r}")
        mask = self.val_chunk_mask if split == "val" else ~self.val_chunk_mask
        return np.flatnonzero(mask)

    def _usable(self, split: str, width: int) -> np.ndarray:
        if width > self.chunk:
            raise ConfigurationError(f"window of {width} tokens exceeds the chunk size {self.chunk}")
        ids = self.chunks(split)
        ends = np.minimum((ids + 1) * self.chunk, self.tokens.size)
        ids = ids[ends - ids * self.chunk >= width]
        if ids.size == 0:
            raise DataError(f"no {split} chunk holds a window of {width} tokens")
        return ids

    def sample_windows(self, split: str, batch: int, width: int, rng: np.random.Generator) -> np.ndarray:
        """``(batch, width)`` windows, each inside a single chunk of ``split``."""
        ids = self._usable(split, width)
        chunk_ids = ids[rng.integers(0, ids.size, size=batch)]
        room = np.minimum((chunk_ids + 1) * self.chunk, self.tokens.size) - chunk_ids * self.chunk - width
        starts = chunk_ids * self.chunk + (rng.random(batch) * (room + 1)).astype(np.int64)
        return self.tokens[starts[:, None] + np.arange(width)].astype(np.int64)

    def fixed_windows(self, split: str, width: int, limit: int | None = None) -> np.ndarray:
        """Deterministic evaluation windows: the leading ``width`` tokens of each chunk."""
        ids = self._usable(split, width)
        if limit is not None:
            ids = ids[np.linspace(0, ids.size - 1, min(limit, ids.size)).round().astype(int)]
        starts = ids * self.chunk
        return self.tokens[starts[:, None] + np.arange(width)].astype(np.int64)


def ingest(path: str | os.PathLike | None = None, val_fraction: float = 0.1, chunk: int = CHUNK) -> Corpus:
    """Read a UTF-8 text file as bytes; ``None`` selects the bundled corpus."""
    path = bundled_corpus_path() if path is None else path
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not valid UTF-8: {exc}") from None
    return Corpus(np.frombuffer(raw, dtype=np.uint8).copy(), val_fraction, chunk)
