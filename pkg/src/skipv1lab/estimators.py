"""scikit-learn style wrappers around training and conversion."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .convert import ConversionStrategy, convert
from .errors import DataError
from .harness.data import Corpus, encode
from .harness.train import TrainConfig, desk_model, train
from .model import Checkpoint, forward, window_loss
from .validation import check_token_array


def _as_tokens(X) -> np.ndarray:
    if isinstance(X, str):
        return encode(X)
    if isinstance(X, (list, tuple)) and X and all(isinstance(x, str) for x in X):
        return encode("\n".join(X))
    tokens = check_token_array(X, vocab_size=256)
    return tokens.ravel()


class ByteLM(BaseEstimator):
    """Byte-level decoder language model.

    ``fit`` takes text (a string or list of strings) or a byte-token array;
    ``predict_proba`` returns the next-byte distribution after each row of a
    token array; ``score`` is the negative mean cross-entropy on held-out text.
    """

    def __init__(self, variant: str = "skipv1", n_layers: int = 2, d_model: int = 128, n_heads: int = 4,
                 ffn_dim: int = 512, ratio: float = 0.5, steps: int = 2000, batch_size: int = 8,
                 seq_len: int = 64, lr: float = 3e-3, val_fraction: float = 0.1, random_state: int = 7):
        self.variant = variant
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.ffn_dim = ffn_dim
        self.ratio = ratio
        self.steps = steps
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.lr = lr
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        model = desk_model(variant=self.variant, n_layers=self.n_layers, d_model=self.d_model,
                           n_heads=self.n_heads, ffn_dim=self.ffn_dim, ratio=self.ratio,
                           n_max=max(256, self.seq_len))
        return TrainConfig(model=model, steps=self.steps, batch_size=self.batch_size, seq_len=self.seq_len,
                           lr=self.lr, seed=self.random_state, val_fraction=self.val_fraction,
                           eval_every=self.steps)

    def fit(self, X, y=None):
        cfg = self._config()
        corpus = Corpus(_as_tokens(X), cfg.val_fraction)
        self.checkpoint_, self.run_log_ = train(cfg, corpus)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        tokens = np.atleast_2d(check_token_array(X, vocab_size=256))
        logits = forward(self.checkpoint_, tokens).data[..., -1].astype(np.float64)
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=-1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=-1)

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "checkpoint_")
        tokens = _as_tokens(X)
        width = self.seq_len + 1
        n = tokens.size // width
        if n == 0:
            raise DataError(f"need at least {width} tokens to score")
        windows = tokens[: n * width].reshape(n, width).astype(np.int64)
        return -float(window_loss(self.checkpoint_, windows).data)


class SkipV1Converter(TransformerMixin, BaseEstimator):
    """Stateless transformer from MHA checkpoints to SkipV1 checkpoints."""

    def __init__(self, strategy: str = "meanv", ratio: float = 0.5):
        self.strategy = strategy
        self.ratio = ratio

    def fit(self, X=None, y=None):
        self.strategy_ = ConversionStrategy(self.strategy)
        return self

    def transform(self, X: Checkpoint | list[Checkpoint]):
        check_is_fitted(self, "strategy_")
        if isinstance(X, Checkpoint):
            return convert(X, self.strategy_, self.ratio)
        return [convert(ck, self.strategy_, self.ratio) for ck in X]
