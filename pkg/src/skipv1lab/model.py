"""Decoder-only language model built from the attention variants."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .attention import LayerPlan, assemble_heads, attend, layer_plan, merge_heads, project_heads
from .config import ModelConfig, VariantKind
from .errors import ConfigurationError, DimensionError, LengthError
from .numeric import (
    Tensor, concat, cross_entropy, layer_norm, matmul, relu, reshape, rope, softmax_scale, swap_last,
    take,
)

OUTPUT_PROJECTIONS = ("attn.wo", "ffn.w2")


@dataclass
class Checkpoint:
    """A model configuration plus its named float32 tensors."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.copy() for k, v in self.tensors.items()}, dict(self.meta))

    def validate(self) -> None:
        expected = parameter_shapes(self.config)
        missing = expected.keys() - self.tensors.keys()
        extra = self.tensors.keys() - expected.keys()
        if missing or extra:
            raise ConfigurationError(f"checkpoint names disagree with config: missing={sorted(missing)} "
                                     f"unexpected={sorted(extra)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigurationError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    def astype(self, dtype) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, dict(self.meta))


def block_prefix(layer: int) -> str:
    return f"blocks.{layer}."


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable tensor of ``config`` in canonical order."""
    d, H, dh, r = config.d_model, config.n_heads, config.head_dim, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (config.vocab_size, d)}
    if config.positional == "learned":
        shapes["pos_emb"] = (config.n_max, d)
    for layer in range(1, config.n_layers + 1):
        p = block_prefix(layer)
        plan = layer_plan(config, layer)
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "attn.wq"] = (H * dh, d)
        if plan.mla:
            d_c, d_r = config.latent_dim, config.rope_dim
            shapes[p + "attn.wdkv"] = (plan.latent_local, d)
            shapes[p + "attn.wuk"] = (H * dh, d_c)
            shapes[p + "attn.wuv"] = (H * dh, d_c)
            if d_r:
                shapes[p + "attn.wkr"] = (d_r, d)
                shapes[p + "attn.wqr"] = (H * d_r, d)
        else:
            if plan.k_local:
                shapes[p + "attn.wk"] = (plan.k_local * dh, d)
            if plan.v_local:
                shapes[p + "attn.wv"] = (plan.v_local * dh, d)
        shapes[p + "attn.wo"] = (d, H * dh)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "ffn.w1"] = (r, d)
        shapes[p + "ffn.w2"] = (d, r)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    return shapes


def init_weights(config: ModelConfig, seed: int = 0, std: float = 0.02) -> Checkpoint:
    """Gaussian init (std 0.02; output projections scaled by 1/sqrt(2L)); unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    out_std = std / np.sqrt(2 * config.n_layers)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            scale = out_std if name.endswith(OUTPUT_PROJECTIONS) else std
            arr = rng.normal(0.0, scale, size=shape)
        tensors[name] = arr.astype(np.float32)
    return Checkpoint(config, tensors)


# ---------------------------------------------------------------------------
# parameter accounting


def _baseline(config: ModelConfig) -> ModelConfig:
    base = {
        VariantKind.SKIPV1: VariantKind.MHA,
        VariantKind.SKIPV1_GQA: VariantKind.GQA,
        VariantKind.SKIPV1_MLA: VariantKind.MLA,
        VariantKind.SKIPKV1: VariantKind.MHA,
        VariantKind.SKIPV1_YOCO: VariantKind.MHA,
        VariantKind.YOCO_V: VariantKind.MHA,
        VariantKind.CLA_V: VariantKind.MHA,
        VariantKind.RESFORMER: VariantKind.MHA,
    }.get(config.variant, config.variant)
    return config.replace(variant=base)


def _bucket(name: str) -> str:
    if name in ("tok_emb", "pos_emb"):
        return "embedding"
    if ".attn." in name:
        return "attention"
    if ".ffn." in name:
        return "ffn"
    return "norm"


def param_count(config: ModelConfig) -> dict[str, int]:
    """Exact parameter counts.

    Convention: no linear biases; the token embedding is tied to the
    unembedding and counted once; learned positions and LayerNorm gains and
    biases are counted. ``value_proj`` counts W_V scalars (W_UV and W_DKV
    for latent variants). ``delta_vs_mha`` compares with plain MHA of the same
    dimensions; ``delta_vs_base`` with the variant's non-skip counterpart
    (SkipV1-GQA vs GQA, SkipV1-MLA vs MLA, everything else vs MHA).
    """

    def tally(cfg: ModelConfig) -> dict[str, int]:
        counts = {"embedding": 0, "attention": 0, "ffn": 0, "norm": 0, "value_proj": 0}
        for name, shape in parameter_shapes(cfg).items():
            size = int(np.prod(shape))
            counts[_bucket(name)] += size
            if name.endswith(("attn.wv", "attn.wdkv", "attn.wuv")):
                counts["value_proj"] += size
        counts["total"] = counts["embedding"] + counts["attention"] + counts["ffn"] + counts["norm"]
        return counts

    own = tally(config)
    own["delta_vs_mha"] = own["total"] - tally(config.replace(variant=VariantKind.MHA))["total"]
    own["delta_vs_base"] = own["total"] - tally(_baseline(config))["total"]
    return own


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardState:
    """Intermediate values retained for analysis and testing."""

    residual: list[Tensor] = field(default_factory=list)
    assembled: dict[int, dict[str, Tensor]] = field(default_factory=dict)
    head_outputs: dict[int, Tensor] = field(default_factory=dict)
    queries: dict[int, Tensor] = field(default_factory=dict)

    @property
    def bank(self) -> Tensor | None:
        first = self.assembled.get(1)
        return None if first is None else first.get("v")


class _NoCache:
    past = 0

    def extend(self, layer: int, key: str, value: Tensor) -> Tensor:
        return value


def as_params(model: Checkpoint | dict) -> dict[str, Tensor]:
    tensors = model.tensors if isinstance(model, Checkpoint) else model
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in tensors.items()}


def _embed(config: ModelConfig, P, tokens: np.ndarray, positions: np.ndarray) -> Tensor:
    x = swap_last(take(P["tok_emb"], tokens, axis=0))
    if config.positional == "learned":
        x = x + swap_last(take(P["pos_emb"], positions, axis=0))
    return x


def _local_projections(config: ModelConfig, plan: LayerPlan, P, xn: Tensor, positions) -> dict[str, Tensor]:
    p = block_prefix(plan.layer)
    rotary = config.positional == "rotary"
    local: dict[str, Tensor] = {}
    if plan.mla:
        local["latent"] = matmul(P[p + "attn.wdkv"], xn)
        if config.rope_dim:
            local["kr"] = rope(matmul(P[p + "attn.wkr"], xn), positions)
        return local
    if plan.k_local:
        k = project_heads(P[p + "attn.wk"], xn, plan.k_local)
        local["k"] = rope(k, positions) if rotary else k
    if plan.v_local:
        local["v"] = project_heads(P[p + "attn.wv"], xn, plan.v_local)
    return local


def _assemble(config: ModelConfig, plan: LayerPlan, P, local: dict[str, Tensor],
              assembled: dict[int, dict[str, Tensor]]) -> dict[str, Tensor]:
    if plan.mla:
        p = block_prefix(plan.layer)
        latent = local["latent"]
        if plan.latent_bank:
            bank = assembled[1]["latent"]
            latent = concat([latent, bank[..., plan.latent_local:, :]], axis=-2)
        H = config.n_heads
        k = project_heads(P[p + "attn.wuk"], latent, H)
        v = project_heads(P[p + "attn.wuv"], latent, H)
        if config.rope_dim:
            kr = local["kr"]
            kr = reshape(kr, kr.shape[:-2] + (1,) + kr.shape[-2:])
            k = concat([take(kr, [0] * H, axis=-3), k], axis=-2)
        return {"k": k, "v": v, "latent": latent}
    k = assemble_heads(plan.k_slots, local.get("k"), {j: a["k"] for j, a in assembled.items()})
    v = assemble_heads(plan.v_slots, local.get("v"), {j: a["v"] for j, a in assembled.items()})
    return {"k": k, "v": v}


def _queries(config: ModelConfig, plan: LayerPlan, P, xn: Tensor, positions) -> Tensor:
    p = block_prefix(plan.layer)
    q = project_heads(P[p + "attn.wq"], xn, config.n_heads)
    if plan.mla:
        if config.rope_dim:
            qr = rope(project_heads(P[p + "attn.wqr"], xn, config.n_heads), positions)
            q = concat([qr, q], axis=-2)
        return q
    return rope(q, positions) if config.positional == "rotary" else q


def run_blocks(config: ModelConfig, P, x: Tensor, positions: np.ndarray, cache=None,
               state: ForwardState | None = None) -> Tensor:
    """Apply all decoder blocks and the final norm to the residual stream ``x``."""
    cache = cache or _NoCache()
    past = cache.past
    assembled: dict[int, dict[str, Tensor]] = {}
    eps = config.ln_eps
    for layer in range(1, config.n_layers + 1):
        p = block_prefix(layer)
        plan = layer_plan(config, layer)
        xn = layer_norm(x, P[p + "ln1.gain"], P[p + "ln1.bias"], eps)
        local = _local_projections(config, plan, P, xn, positions)
        full = {key: cache.extend(layer, key, value) for key, value in local.items()}
        assembled[layer] = _assemble(config, plan, P, full, assembled)
        q = _queries(config, plan, P, xn, positions)
        scale = softmax_scale(q.shape[-2])
        heads = attend(q, assembled[layer]["k"], assembled[layer]["v"], scale, past)
        x = x + matmul(P[p + "attn.wo"], merge_heads(heads))
        xn2 = layer_norm(x, P[p + "ln2.gain"], P[p + "ln2.bias"], eps)
        x = x + matmul(P[p + "ffn.w2"], relu(matmul(P[p + "ffn.w1"], xn2)))
        if state is not None:
            state.residual.append(x)
            state.head_outputs[layer] = heads
            state.queries[layer] = q
    if state is not None:
        state.assembled = assembled
    return layer_norm(x, P["ln_f.gain"], P["ln_f.bias"], eps)


def check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.dtype.kind not in "iu":
        raise DimensionError(f"token ids must be integers, got {tokens.dtype}")
    if tokens.ndim not in (1, 2) or tokens.shape[-1] == 0:
        raise DimensionError(f"tokens must be a non-empty (n,) or (batch, n) array, got {tokens.shape}")
    if tokens.shape[-1] > config.n_max:
        raise LengthError(f"sequence length {tokens.shape[-1]} exceeds n_max={config.n_max}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise IndexError(f"token id outside vocabulary of size {config.vocab_size}")
    return tokens.astype(np.intp)


def forward(model: Checkpoint, tokens, params: dict | None = None,
            state: ForwardState | None = None) -> Tensor:
    """Logits ``(..., V, n)`` for token ids ``(..., n)``."""
    config = model.config
    tokens = check_tokens(config, tokens)
    P = as_params(params if params is not None else model)
    positions = np.arange(tokens.shape[-1])
    x = _embed(config, P, tokens, positions)
    h = run_blocks(config, P, x, positions, state=state)
    return matmul(P["tok_emb"], h)


def trainable_names(config: ModelConfig) -> Iterable[str]:
    return parameter_shapes(config).keys()


def window_loss(model: Checkpoint, windows, params: dict | None = None) -> Tensor:
    """Mean next-token cross-entropy over token windows ``(..., n + 1)``."""
    windows = np.asarray(windows)
    logits = forward(model, windows[..., :-1], params=params)
    return cross_entropy(logits, windows[..., 1:])
