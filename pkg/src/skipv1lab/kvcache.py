"""Incremental decoding cache and analytic KV-cache byte accounting.

Only the key/value heads a layer computes itself are cached. Borrowed heads
(SkipV1's layer-1 values, YOCO/CLA sharing, GQA group expansion) are
reassembled from those buffers at every step, so layer 1's skip-head values
are stored exactly once however deep the model is.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .attention import layer_plan
from .config import ModelConfig, VariantKind
from .errors import ConfigurationError, LengthError
from .model import Checkpoint, _embed, as_params, run_blocks
from .numeric import Tensor, matmul

MLA_MODES = ("uniform", "layer1-full")


@dataclass(frozen=True)
class CacheSpec:
    """Per-layer cached element counts per token and the element width."""

    variant: str
    n_layers: int
    d_model: int
    n_heads: int
    k_elems: tuple[int, ...]
    v_elems: tuple[int, ...]
    elem_bytes: int = 2
    mla_mode: str = "uniform"

    def __post_init__(self):
        if len(self.k_elems) != self.n_layers or len(self.v_elems) != self.n_layers:
            raise ConfigurationError("one K and one V count per layer required")
        if min(self.k_elems + self.v_elems, default=0) < 0:
            raise ConfigurationError("cached element counts must be non-negative")

    @classmethod
    def from_config(cls, config: ModelConfig, elem_bytes: int | None = None,
                    mla_mode: str = "uniform") -> "CacheSpec":
        """Counts as stored by :class:`DecodeCache`.

        Latent variants cache the latent under ``v`` and the rotary key under
        ``k``. For SkipV1-MLA, ``"layer1-full"`` is the actual storage (layer 1
        keeps its full latent); ``"uniform"`` charges every layer the halved
        latent.
        """
        if mla_mode not in MLA_MODES:
            raise ConfigurationError(f"mla_mode must be one of {MLA_MODES}, got {mla_mode!r}")
        dh = config.head_dim
        ks, vs = [], []
        for layer in range(1, config.n_layers + 1):
            plan = layer_plan(config, layer)
            if plan.mla:
                latent = plan.latent_local
                if config.variant is VariantKind.SKIPV1_MLA and mla_mode == "uniform":
                    latent = int(round((1.0 - config.ratio) * config.latent_dim))
                ks.append(config.rope_dim)
                vs.append(latent)
            else:
                ks.append(plan.k_local * dh)
                vs.append(plan.v_local * dh)
        return cls(config.variant.value, config.n_layers, config.d_model, config.n_heads,
                   tuple(ks), tuple(vs), elem_bytes or config.elem_bytes, mla_mode)

    @property
    def elems_per_token(self) -> int:
        return sum(self.k_elems) + sum(self.v_elems)


def bytes_per_token(spec: CacheSpec) -> int:
    return spec.elems_per_token * spec.elem_bytes


def slope_ratio(spec: CacheSpec, reference: CacheSpec) -> Fraction:
    """Exact ratio of per-token bytes between two specs."""
    return Fraction(bytes_per_token(spec), bytes_per_token(reference))


REPORT_HEADER = ["variant", "L", "d", "H", "elem_bytes", "seq_len", "kv_bytes_total", "kv_bytes_per_token"]


def cache_report(specs: CacheSpec | Sequence[CacheSpec], seq_lens: Iterable[int]) -> list[dict]:
    """Rows of total cache bytes for each spec and sequence length."""
    specs = [specs] if isinstance(specs, CacheSpec) else list(specs)
    seq_lens = list(seq_lens)
    if not seq_lens:
        raise ValueError("seq_lens must be non-empty")
    if any(n < 0 for n in seq_lens):
        raise ValueError("sequence lengths must be non-negative")
    rows = []
    for spec in specs:
        per = bytes_per_token(spec)
        for n in seq_lens:
            rows.append({"variant": spec.variant if spec.variant != "skipv1_mla" else f"skipv1_mla[{spec.mla_mode}]",
                         "L": spec.n_layers, "d": spec.d_model, "H": spec.n_heads,
                         "elem_bytes": spec.elem_bytes, "seq_len": n,
                         "kv_bytes_total": per * n, "kv_bytes_per_token": per})
    return rows


def report_csv(rows: list[dict], echo: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in echo:
        buf.write(f"# {line}\n")
    writer = csv.DictWriter(buf, fieldnames=REPORT_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    widths = sorted({r["elem_bytes"] for r in rows})
    buf.write(f"# element width: {', '.join(map(str, widths))} bytes\n")
    return buf.getvalue()


def _table3_base(**kw) -> ModelConfig:
    return ModelConfig(n_layers=24, d_model=1024, n_heads=16, ffn_dim=4096, vocab_size=50257,
                       n_max=1024, **kw)


def preset_specs(name: str) -> list[CacheSpec]:
    if name == "table3-gqa":
        return [CacheSpec.from_config(_table3_base(variant=v, groups=8), elem_bytes=4)
                for v in ("gqa", "skipv1_gqa")]
    if name == "table3-mla":
        cfgs = [_table3_base(variant=v, latent_dim=256, rope_dim=32) for v in ("mla", "skipv1_mla")]
        return [CacheSpec.from_config(cfgs[0], elem_bytes=2),
                CacheSpec.from_config(cfgs[1], elem_bytes=2, mla_mode="uniform"),
                CacheSpec.from_config(cfgs[1], elem_bytes=2, mla_mode="layer1-full")]
    if name == "mha-skipv1":
        return [CacheSpec.from_config(_table3_base(variant=v), elem_bytes=2) for v in ("mha", "skipv1")]
    raise ConfigurationError(f"unknown cache preset {name!r}; choose table3-gqa, table3-mla or mha-skipv1")


PRESETS = ("table3-gqa", "table3-mla", "mha-skipv1")


# ---------------------------------------------------------------------------
# decoding


class _Buffer:
    """Growable array whose last axis is time; capacity doubles on overflow."""

    def __init__(self, first: np.ndarray):
        self.length = 0
        cap = max(4, first.shape[-1])
        self.data = np.empty(first.shape[:-1] + (cap,), dtype=first.dtype)

    def append(self, block: np.ndarray) -> np.ndarray:
        if block.shape[:-1] != self.data.shape[:-1]:
            raise ConfigurationError(f"cache block {block.shape} does not match buffer {self.data.shape}")
        need = self.length + block.shape[-1]
        if need > self.data.shape[-1]:
            cap = self.data.shape[-1]
            while cap < need:
                cap *= 2
            grown = np.empty(self.data.shape[:-1] + (cap,), dtype=self.data.dtype)
            grown[..., :self.length] = self.data[..., :self.length]
            self.data = grown
        self.data[..., self.length:need] = block
        self.length = need
        return self.view()

    def view(self) -> np.ndarray:
        return self.data[..., :self.length]


class DecodeCache:
    """Per-layer buffers of locally computed keys/values (or latents).

    Keys: ``"k"``/``"v"`` hold ``(..., heads, d_H, t)`` head blocks; latent
    variants store ``"latent"`` ``(..., d_c', t)`` and ``"kr"`` (post-rotary).
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.length = 0
        self.buffers: dict[tuple[int, str], _Buffer] = {}
        self.writes: list[tuple[int, str]] = []
        self.batch_shape: tuple[int, ...] = ()

    @property
    def past(self) -> int:
        return self.length

    def extend(self, layer: int, key: str, value: Tensor) -> Tensor:
        block = value.data
        buf = self.buffers.get((layer, key))
        if buf is None:
            if self.length:
                raise ConfigurationError(f"buffer {key!r} of layer {layer} appeared mid-stream")
            buf = self.buffers[(layer, key)] = _Buffer(block)
        if buf.length != self.length:
            raise ConfigurationError(f"buffer {key!r} of layer {layer} written twice in one step")
        self.writes.append((layer, key))
        return Tensor(buf.append(block))

    def commit(self, n: int) -> None:
        self.length += n
        for (layer, key), buf in self.buffers.items():
            if buf.length != self.length:
                raise ConfigurationError(f"buffer {key!r} of layer {layer} out of step")

    def view(self, layer: int, key: str) -> np.ndarray:
        return self.buffers[(layer, key)].view()

    @property
    def skip_v_buffer(self) -> np.ndarray | None:
        """Layer 1's value heads that deeper layers borrow (a view, not a copy)."""
        cfg = self.config
        if (1, "v") not in self.buffers or cfg.variant not in (
                VariantKind.SKIPV1, VariantKind.SKIPV1_YOCO, VariantKind.SKIPKV1, VariantKind.SKIPV1_GQA):
            return None
        heads = cfg.groups if cfg.variant is VariantKind.SKIPV1_GQA else cfg.n_heads
        local = layer_plan(cfg, 2).v_local if cfg.n_layers >= 2 else heads
        return self.view(1, "v")[..., local:, :, :]

    def stored_elements(self) -> int:
        """Logical scalars held, per sequence in the batch."""
        batch = int(np.prod(self.batch_shape))
        return sum(buf.view().size for buf in self.buffers.values()) // batch

    def nbytes(self, elem_bytes: int | None = None) -> int:
        return self.stored_elements() * (elem_bytes or self.config.elem_bytes)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.buffers):
            h.update(repr(key).encode())
            h.update(np.ascontiguousarray(self.buffers[key].view()).tobytes())
        return h.hexdigest()


def decode_step(model: Checkpoint, cache: DecodeCache, token, params=None) -> Tensor:
    """Feed one token (or a batch of tokens) and return next-token logits ``(..., V)``."""
    config = model.config
    if cache.config != config:
        raise ConfigurationError("decode cache was built for a different model configuration")
    t = cache.length
    if t >= config.n_max:
        raise LengthError(f"cache already holds n_max={config.n_max} tokens")
    tok = np.asarray(token)
    if tok.dtype.kind not in "iu":
        raise ConfigurationError(f"token ids must be integers, got {tok.dtype}")
    if tok.min() < 0 or tok.max() >= config.vocab_size:
        raise IndexError(f"token id outside vocabulary of size {config.vocab_size}")
    if t == 0:
        cache.batch_shape = tok.shape
    elif tok.shape != cache.batch_shape:
        raise ConfigurationError(f"token batch {tok.shape} differs from cached batch {cache.batch_shape}")
    tokens = tok.astype(np.intp)[..., None]
    P = as_params(params if params is not None else model)
    positions = np.array([t])
    x = _embed(config, P, tokens, positions)
    h = run_blocks(config, P, x, positions, cache=cache)
    cache.commit(1)
    logits = matmul(P["tok_emb"], h)
    return logits[..., 0]


def decode_sequence(model: Checkpoint, tokens, cache: DecodeCache | None = None) -> tuple[np.ndarray, DecodeCache]:
    """Decode ``tokens`` step by step; returns logits ``(..., V, n)`` and the cache."""
    tokens = np.asarray(tokens)
    cache = cache or DecodeCache(model.config)
    cols = [decode_step(model, cache, tokens[..., i]).data for i in range(tokens.shape[-1])]
    return np.stack(cols, axis=-1), cache
