"""MHA to SkipV1 checkpoint conversion for uptraining."""
from __future__ import annotations

import csv
import io
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .config import HeadInjection, VariantKind, local_head_count
from .errors import ConfigurationError, VariantError
from .model import Checkpoint, block_prefix, init_weights, window_loss


class ConversionStrategy(str, Enum):
    MEANV = "meanv"
    MEANVO = "meanvo"
    TOPV = "topv"
    TOPVO = "topvo"
    SVD = "svd"


def _blocks(w: np.ndarray, n_heads: int, axis: int) -> list[np.ndarray]:
    return np.split(w, n_heads, axis=axis)


def _top_heads(blocks: Sequence[np.ndarray], keep: int) -> list[int]:
    """Indices of the ``keep`` largest Frobenius norms, returned in head order."""
    norms = np.array([np.linalg.norm(b) for b in blocks])
    # stable: ties resolve to the lower index
    order = np.argsort(-norms, kind="stable")[:keep]
    return sorted(int(i) for i in order)


def _convert_layer(wv: np.ndarray, wo: np.ndarray, n_heads: int, n_local: int,
                   strategy: ConversionStrategy) -> tuple[np.ndarray, np.ndarray]:
    """Return (local W_V rows, new W_O) for one layer."""
    v_blocks = _blocks(wv, n_heads, axis=0)
    o_blocks = _blocks(wo, n_heads, axis=1)
    dh = wv.shape[0] // n_heads
    if strategy in (ConversionStrategy.MEANV, ConversionStrategy.MEANVO):
        if n_heads % n_local:
            raise ConfigurationError(f"mean pooling needs H'={n_local} to divide H={n_heads}")
        size = n_heads // n_local
        groups = [range(j * size, (j + 1) * size) for j in range(n_local)]
        new_v = np.concatenate([np.mean([v_blocks[h] for h in g], axis=0) for g in groups], axis=0)
        if strategy is ConversionStrategy.MEANV:
            return new_v, wo.copy()
        pooled = [np.mean([o_blocks[h] for h in g], axis=0) for g in groups]
        zeros = [np.zeros_like(o_blocks[0])] * (n_heads - n_local)
        return new_v, np.concatenate(pooled + zeros, axis=1)
    if strategy in (ConversionStrategy.TOPV, ConversionStrategy.TOPVO):
        keep_v = _top_heads(v_blocks, n_local)
        new_v = np.concatenate([v_blocks[h] for h in keep_v], axis=0)
        if strategy is ConversionStrategy.TOPV:
            return new_v, wo.copy()
        keep_o = _top_heads(o_blocks, n_local)
        rest = [h for h in range(n_heads) if h not in keep_o]
        return new_v, np.concatenate([o_blocks[h] for h in keep_o + rest], axis=1)
    # SVD: best rank-(H' d_H) factorisation of W_O W_V placed in the local slots
    product = wo.astype(np.float64) @ wv.astype(np.float64)
    u, s, vt = np.linalg.svd(product)
    r = n_local * dh
    root = np.sqrt(s[:r])
    new_v = (root[:, None] * vt[:r]).astype(wv.dtype)
    new_o = wo.copy()
    new_o[:, :r] = (u[:, :r] * root[None, :]).astype(wo.dtype)
    return new_v, new_o


def convert(ck: Checkpoint, strategy: ConversionStrategy | str = ConversionStrategy.MEANV,
            ratio: float = 0.5) -> Checkpoint:
    """Turn an MHA checkpoint into a SkipV1 checkpoint; layer 1 is copied verbatim."""
    strategy = ConversionStrategy(strategy)
    cfg = ck.config
    if cfg.variant is not VariantKind.MHA:
        raise VariantError(f"conversion expects an MHA checkpoint, got {cfg.variant.value}")
    n_local = local_head_count(cfg.n_heads, ratio)
    if abs((1.0 - ratio) * cfg.n_heads - n_local) > 1e-9:
        raise ConfigurationError(f"ratio {ratio} does not split H={cfg.n_heads} heads evenly")
    if strategy in (ConversionStrategy.MEANV, ConversionStrategy.MEANVO) and cfg.n_heads % n_local:
        raise ConfigurationError(f"H={cfg.n_heads} heads cannot be pooled into {n_local} local heads")
    ck.validate()
    new_cfg = cfg.replace(variant=VariantKind.SKIPV1, ratio=ratio, injection=HeadInjection.SECOND_HALF)
    tensors = {k: v.copy() for k, v in ck.tensors.items()}
    for layer in range(2, cfg.n_layers + 1):
        p = block_prefix(layer)
        wv, wo = _convert_layer(ck.tensors[p + "attn.wv"], ck.tensors[p + "attn.wo"],
                                cfg.n_heads, n_local, strategy)
        tensors[p + "attn.wv"] = np.ascontiguousarray(wv, dtype=np.float32)
        tensors[p + "attn.wo"] = np.ascontiguousarray(wo, dtype=np.float32)
    meta = dict(ck.meta, converted_from="mha", strategy=strategy.value)
    out = Checkpoint(new_cfg, tensors, meta)
    out.validate()
    return out


COMPARE_HEADER = ["strategy", "initial_loss"]


def initial_loss_compare(ck: Checkpoint, windows: np.ndarray,
                         strategies: Iterable[ConversionStrategy | str] = tuple(ConversionStrategy),
                         ratio: float = 0.5, control_seed: int | None = 0) -> list[dict]:
    """Validation loss of each converted checkpoint before any uptraining.

    With ``control_seed`` a freshly initialised SkipV1 model of the same
    shape is evaluated as the ``random`` row.
    """
    rows = [{"strategy": "mha", "initial_loss": float(window_loss(ck, windows).data)}]
    for s in strategies:
        converted = convert(ck, s, ratio)
        rows.append({"strategy": ConversionStrategy(s).value,
                     "initial_loss": float(window_loss(converted, windows).data)})
    if control_seed is not None:
        cfg = ck.config.replace(variant=VariantKind.SKIPV1, ratio=ratio)
        rows.append({"strategy": "random",
                     "initial_loss": float(window_loss(init_weights(cfg, control_seed), windows).data)})
    return rows


def compare_csv(rows: list[dict], echo: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in echo:
        buf.write(f"# {line}\n")
    writer = csv.DictWriter(buf, fieldnames=COMPARE_HEADER, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({"strategy": r["strategy"], "initial_loss": f"{r['initial_loss']:.6f}"})
    return buf.getvalue()
