"""Frozen-model analyses: per-layer linear probes and cosine-similarity matrices."""
from __future__ import annotations

import csv
import io
from typing import Sequence

import numpy as np

from ..errors import ConfigurationError
from ..model import Checkpoint, ForwardState, forward
from ..numeric import GradTape, Tensor, cross_entropy, layer_norm, matmul
from .data import Corpus
from .train import AdamW


def _check_layer(ck: Checkpoint, layer: int) -> None:
    if not 1 <= layer <= ck.config.n_layers:
        raise ConfigurationError(f"layer must lie in [1, {ck.config.n_layers}], got {layer}")


def layer_features(ck: Checkpoint, windows: np.ndarray) -> list[np.ndarray]:
    """Residual stream ``(B, d, n)`` after each block, for inputs ``windows[..., :-1]``."""
    state = ForwardState()
    forward(ck, windows[..., :-1], state=state)
    return [r.data for r in state.residual]


def _head_loss(P: dict[str, Tensor], feats: np.ndarray, targets: np.ndarray, eps: float) -> Tensor:
    h = layer_norm(Tensor(feats), P["gain"], P["bias"], eps)
    return cross_entropy(matmul(P["head"], h), targets)


def probe(ck: Checkpoint, corpus: Corpus, layers: Sequence[int] | None = None, seq_len: int = 64,
          steps: int = 300, lr: float = 1e-3, batch: int = 16, pool: int = 256,
          eval_windows: int = 64, seed: int = 0) -> list[dict]:
    """Validation loss of a norm + linear head trained on each frozen layer's output.

    The head starts from the model's own final norm and tied unembedding, so
    the probe on the last layer begins at the full model's loss.
    """
    cfg = ck.config
    layers = list(range(1, cfg.n_layers + 1)) if layers is None else list(layers)
    for layer in layers:
        _check_layer(ck, layer)
    rng = np.random.default_rng((seed, 4))
    train_w = corpus.sample_windows("train", pool, seq_len + 1, rng)
    val_w = corpus.fixed_windows("val", seq_len + 1, eval_windows)
    train_f = layer_features(ck, train_w)
    val_f = layer_features(ck, val_w)
    model_loss = float(cross_entropy(forward(ck, val_w[..., :-1]), val_w[..., 1:]).data)
    rows = []
    for layer in layers:
        params = {"gain": ck.tensors["ln_f.gain"].copy(), "bias": ck.tensors["ln_f.bias"].copy(),
                  "head": ck.tensors["tok_emb"].copy()}
        opt = AdamW(params, weight_decay=0.0)
        order = np.random.default_rng((seed, 5, layer))
        for _ in range(steps):
            idx = order.integers(0, pool, size=batch)
            P = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            with GradTape() as tape:
                loss = _head_loss(P, train_f[layer - 1][idx], train_w[idx, 1:], cfg.ln_eps)
            grads = dict(zip(P, tape.gradient(loss, list(P.values()))))
            opt.step(params, grads, lr)
        P = {k: Tensor(v) for k, v in params.items()}
        val = float(_head_loss(P, val_f[layer - 1], val_w[:, 1:], cfg.ln_eps).data)
        rows.append({"layer": layer, "probe_loss": val, "model_loss": model_loss})
    return rows


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    """Cosine similarity between the rows of ``vectors`` (..., m, k), averaged over leading axes.

    Zero rows are similar to nothing but themselves.
    """
    v = np.asarray(vectors, dtype=np.float64)
    v = v.reshape((-1,) + v.shape[-2:])
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    unit = np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)
    sims = np.mean(unit @ np.swapaxes(unit, -1, -2), axis=0)
    sims = 0.5 * (sims + sims.T)
    np.fill_diagonal(sims, 1.0)
    return sims


def similarity(ck: Checkpoint, corpus: Corpus, layer: int, seq_len: int = 64,
               n_windows: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """(head-head, token-token) cosine similarities at ``layer`` over fixed validation windows."""
    _check_layer(ck, layer)
    windows = corpus.fixed_windows("val", seq_len, n_windows)
    return similarity_on(ck, windows, layer)


def similarity_on(ck: Checkpoint, tokens: np.ndarray, layer: int) -> tuple[np.ndarray, np.ndarray]:
    _check_layer(ck, layer)
    state = ForwardState()
    forward(ck, tokens, state=state)
    heads = state.head_outputs[layer].data            # (..., H, dh, n)
    per_head = heads.reshape(heads.shape[:-2] + (-1,))
    residual = state.residual[layer - 1].data         # (..., d, n)
    return cosine_matrix(per_head), cosine_matrix(np.swapaxes(residual, -1, -2))


def probe_csv(rows: list[dict], echo: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in echo:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "probe_loss", "model_loss"])
    for r in rows:
        w.writerow([r["layer"], f"{r['probe_loss']:.6f}", f"{r['model_loss']:.6f}"])
    return buf.getvalue()


def matrix_csv(m: np.ndarray, label: str, echo: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in echo:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([label] + [str(j) for j in range(m.shape[1])])
    for i, row in enumerate(m):
        w.writerow([i] + [f"{x:.8f}" for x in row])
    return buf.getvalue()
