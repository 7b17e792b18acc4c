"""Attention forward passes for MHA, SkipV1 and the cross-layer variants.

Every variant reduces to the same computation: per-head queries, keys and
values of shape ``(..., H, d_H, n)`` followed by

    out = sum_h W_O^h V^h softmax((K^h)^T Q^h / sqrt(d_H))

What differs is where each head's keys and values come from. A
:class:`LayerPlan` records, for every head slot, a weighted list of sources:
the layer's own projections (``layer == 0``) or the assembled heads of an
earlier layer. SkipV1's value skip is then simply "slots H'..H read layer 1".
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .config import HeadInjection, ModelConfig, VariantKind, local_head_count
from .errors import ConfigurationError, DimensionError
from .numeric import (
    Tensor, as_tensor, causal_softmax, concat, matmul, reshape, rope, softmax_scale, swap_last, take,
)


class SlotTerm(NamedTuple):
    """One weighted contribution to a head slot.

    ``layer`` is 0 for the current layer's own projections, otherwise the
    1-based index of the layer whose assembled heads are read.
    """

    layer: int
    head: int
    weight: float = 1.0


Slots = tuple[tuple[SlotTerm, ...], ...]


@dataclass(frozen=True)
class LayerPlan:
    layer: int
    n_heads: int
    k_local: int
    v_local: int
    k_slots: Slots
    v_slots: Slots
    latent_local: int = 0
    latent_bank: bool = False

    @property
    def mla(self) -> bool:
        return self.latent_local > 0


@dataclass
class AttnWeights:
    """Per-layer projections stored as stacked head blocks.

    ``wq``: ``(H*d_H, d)``; ``wk``: ``(hk*d_H, d)``; ``wv``: ``(hv*d_H, d)`` or
    ``None`` when every value head is borrowed; ``wo``: ``(d, H*d_H)`` whose
    column block ``h`` is ``W_O^h``.
    """

    wq: Tensor
    wk: Tensor | None
    wv: Tensor | None
    wo: Tensor
    n_heads: int

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.n_heads


@dataclass
class MLAWeights:
    """Low-rank latent key/value projections plus the decoupled rotary path."""

    wq: Tensor
    wo: Tensor
    wdkv: Tensor
    wuk: Tensor
    wuv: Tensor
    n_heads: int
    wkr: Tensor | None = None
    wqr: Tensor | None = None

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.n_heads

    @property
    def rope_dim(self) -> int:
        return 0 if self.wkr is None else self.wkr.shape[0]


# ---------------------------------------------------------------------------
# head selection


def select_skip_heads(n_heads: int, ratio: float, layer: int,
                      injection: HeadInjection | str = HeadInjection.SECOND_HALF) -> tuple[tuple[tuple[str, int, float], ...], ...]:
    """Map every head slot of ``layer`` to its value source.

    Returns one tuple of ``(source, head, weight)`` terms per slot, where
    ``source`` is ``"local"`` (the layer's own value heads, numbered
    ``0..H'-1``) or ``"bank"`` (layer 1's value heads).
    """
    injection = HeadInjection(injection)
    if layer < 2:
        raise ConfigurationError(f"skip heads are defined from layer 2 on, got layer {layer}")
    n_local = local_head_count(n_heads, ratio)
    n_skip = n_heads - n_local
    local = [(("local", h, 1.0),) for h in range(n_local)]
    if injection is HeadInjection.SECOND_HALF:
        skip = [(("bank", h, 1.0),) for h in range(n_local, n_heads)]
        return tuple(local + skip)
    if injection is HeadInjection.SKIPV1_PLUS_RES:
        mixed = [(("local", h, 0.5), ("bank", h, 0.5)) for h in range(n_local)]
        skip = [(("bank", h, 1.0),) for h in range(n_local, n_heads)]
        return tuple(mixed + skip)
    if injection is HeadInjection.POOLING:
        skip = [(("bank", k, 0.5), ("bank", n_local + k, 0.5)) for k in range(n_skip)]
        return tuple(local + skip)
    if injection is HeadInjection.ODD_EVEN:
        first = layer % 2 == 1
        skip = [(("bank", k if first else n_heads - n_skip + k, 1.0),) for k in range(n_skip)]
        return tuple(local + skip)
    # DYNAMIC: bank head (layer + j) lands on slot (layer + j + H') mod H
    slots: list = [None] * n_heads
    for j in range(n_skip):
        slots[(layer + j + n_local) % n_heads] = (("bank", (layer + j) % n_heads, 1.0),)
    free = iter(range(n_local))
    return tuple(s if s is not None else (("local", next(free), 1.0),) for s in slots)


def _identity(n: int) -> Slots:
    return tuple((SlotTerm(0, h),) for h in range(n))


def _from_selection(selection) -> Slots:
    return tuple(tuple(SlotTerm(0 if src == "local" else 1, h, w) for src, h, w in slot)
                 for slot in selection)


def layer_plan(config: ModelConfig, layer: int) -> LayerPlan:
    """Head-source plan for 1-based ``layer`` under ``config.variant``."""
    L, H = config.n_layers, config.n_heads
    if not 1 <= layer <= L:
        raise ConfigurationError(f"layer {layer} outside 1..{L}")
    kind = config.variant
    full = _identity(H)

    def plain() -> LayerPlan:
        return LayerPlan(layer, H, H, H, full, full)

    def skipv1() -> LayerPlan:
        if layer == 1:
            return plain()
        sel = select_skip_heads(H, config.ratio, layer, config.injection)
        return LayerPlan(layer, H, H, config.local_heads, full, _from_selection(sel))

    if kind is VariantKind.MHA:
        return plain()
    if kind is VariantKind.SKIPV1:
        return skipv1()
    if kind is VariantKind.RESFORMER:
        if layer == 1:
            return plain()
        lam = config.resformer_lambda
        slots = tuple((SlotTerm(0, h, lam), SlotTerm(1, h, 1.0 - lam)) for h in range(H))
        return LayerPlan(layer, H, H, H, full, slots)
    if kind.is_gqa:
        G = config.groups
        per = H // G
        grouped = tuple((SlotTerm(0, h // per),) for h in range(H))
        if kind is VariantKind.GQA or layer == 1:
            return LayerPlan(layer, H, G, G, grouped, grouped)
        g_local = local_head_count(G, config.ratio)
        v = tuple((SlotTerm(0, h // per),) if h // per < g_local else (SlotTerm(1, (h // per) * per),)
                  for h in range(H))
        return LayerPlan(layer, H, G, g_local, grouped, v)
    if kind.is_mla:
        d_c = config.latent_dim
        if kind is VariantKind.SKIPV1_MLA and layer > 1:
            kept = int(round((1.0 - config.ratio) * d_c))
            return LayerPlan(layer, H, 0, 0, (), (), latent_local=kept, latent_bank=True)
        return LayerPlan(layer, H, 0, 0, (), (), latent_local=d_c)
    if kind is VariantKind.YOCO_V:
        src = L // 2
        if L >= 2 and layer > src:
            return LayerPlan(layer, H, H, 0, full, tuple((SlotTerm(src, h),) for h in range(H)))
        return plain()
    if kind is VariantKind.CLA_V:
        leader = ((layer - 1) // config.cla_period) * config.cla_period + 1
        if layer != leader:
            return LayerPlan(layer, H, H, 0, full, tuple((SlotTerm(leader, h),) for h in range(H)))
        return plain()
    if kind is VariantKind.SKIPKV1:
        if layer == 1:
            return plain()
        kept = config.local_heads
        slots = tuple((SlotTerm(0, h),) if h < kept else (SlotTerm(1, h),) for h in range(H))
        return LayerPlan(layer, H, kept, kept, slots, slots)
    if kind is VariantKind.SKIPV1_YOCO:
        src = max(L // 2, 1)
        base = skipv1()
        if L >= 2 and layer > src:
            k = tuple((SlotTerm(src, h),) for h in range(H))
            return LayerPlan(layer, H, 0, base.v_local, k, base.v_slots)
        return base
    raise ConfigurationError(f"unhandled variant {kind}")


# ---------------------------------------------------------------------------
# core computation


def project_heads(w: Tensor, x: Tensor, n_heads: int) -> Tensor:
    """``(rows, d) @ (..., d, n)`` split into ``(..., n_heads, rows/n_heads, n)``."""
    y = matmul(w, x)
    return reshape(y, y.shape[:-2] + (n_heads, y.shape[-2] // n_heads, y.shape[-1]))


def merge_heads(x: Tensor) -> Tensor:
    return reshape(x, x.shape[:-3] + (x.shape[-3] * x.shape[-2], x.shape[-1]))


def assemble_heads(slots: Slots, local: Tensor | None, assembled: dict[int, Tensor]) -> Tensor:
    """Build the ``(..., H, d_H, n)`` head tensor described by ``slots``."""
    n_local = 0 if local is None else local.shape[-3]
    if local is not None and len(slots) == n_local and all(
            len(s) == 1 and s[0] == SlotTerm(0, h) for h, s in enumerate(slots)):
        return local
    sources: list[int] = sorted({t.layer for s in slots for t in s})
    pool_parts, offset = [], {}
    cursor = 0
    for src in sources:
        part = local if src == 0 else assembled[src]
        if part is None:
            raise ConfigurationError(f"slot plan references missing source layer {src}")
        offset[src] = cursor
        cursor += part.shape[-3]
        pool_parts.append(part)
    pool = concat(pool_parts, axis=-3)
    if all(len(s) == 1 and s[0].weight == 1.0 for s in slots):
        idx = [offset[s[0].layer] + s[0].head for s in slots]
        return take(pool, idx, axis=-3)
    mix = np.zeros((len(slots), cursor), dtype=pool.dtype)
    for h, s in enumerate(slots):
        for t in s:
            mix[h, offset[t.layer] + t.head] += t.weight
    flat = reshape(pool, pool.shape[:-3] + (cursor, pool.shape[-2] * pool.shape[-1]))
    mixed = matmul(Tensor(mix), flat)
    return reshape(mixed, pool.shape[:-3] + (len(slots),) + pool.shape[-2:])


def attend(q: Tensor, k: Tensor, v: Tensor, scale: float, past: int = 0) -> Tensor:
    """Per-head outputs ``V^h softmax(K^hT Q^h)``, shape ``(..., H, d_H, n_q)``."""
    scores = matmul(swap_last(k), q)
    p = causal_softmax(scores, scale, past)
    return matmul(v, p)


def _check_input(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"attention input must be (..., d, n), got {x.shape}")
    return x


def _positions(n: int, past: int = 0) -> np.ndarray:
    return np.arange(past, past + n)


def _maybe_rope(t: Tensor, rotary: bool, positions) -> Tensor:
    return rope(t, positions) if rotary else t


# ---------------------------------------------------------------------------
# public attention operations (residual included: Y = X + attention)


def attn_mha(x, w: AttnWeights, rotary: bool = False) -> tuple[Tensor, Tensor]:
    """Standard multi-head attention; returns ``(Y, value heads)``."""
    x = _check_input(x)
    if w.wv is None or w.wv.shape[0] != w.wq.shape[0] or w.wk is None or w.wk.shape[0] != w.wq.shape[0]:
        raise ConfigurationError("attn_mha needs local key and value projections for every head")
    H, pos = w.n_heads, _positions(x.shape[-1])
    q = _maybe_rope(project_heads(w.wq, x, H), rotary, pos)
    k = _maybe_rope(project_heads(w.wk, x, H), rotary, pos)
    v = project_heads(w.wv, x, H)
    out = attend(q, k, v, softmax_scale(w.head_dim))
    return x + matmul(w.wo, merge_heads(out)), v


def attn_skipv1(x, bank, w: AttnWeights, injection: HeadInjection | str = HeadInjection.SECOND_HALF,
                layer: int = 2, rotary: bool = False) -> Tensor:
    """SkipV1 attention: the first ``H'`` heads use local values, the rest read ``bank``.

    ``H'`` is taken from the number of value heads in ``w.wv``.
    """
    x, bank = _check_input(x), as_tensor(bank)
    H, dh = w.n_heads, w.head_dim
    n_local = 0 if w.wv is None else w.wv.shape[0] // dh
    if bank.shape[-3:-1] != (H, dh) or bank.shape[-1] != x.shape[-1]:
        raise ConfigurationError(f"value bank {bank.shape} does not match {H} heads of dim {dh} "
                                 f"over {x.shape[-1]} tokens")
    if n_local == H:
        return attn_mha(x, w, rotary)[0]
    ratio = 1.0 - n_local / H
    slots = _from_selection(select_skip_heads(H, ratio, layer, injection))
    pos = _positions(x.shape[-1])
    q = _maybe_rope(project_heads(w.wq, x, H), rotary, pos)
    k = _maybe_rope(project_heads(w.wk, x, H), rotary, pos)
    local = project_heads(w.wv, x, n_local) if n_local else None
    v = assemble_heads(slots, local, {1: bank})
    out = attend(q, k, v, softmax_scale(dh))
    return x + matmul(w.wo, merge_heads(out))


def attn_resformer(x, bank, w: AttnWeights, lam: float, rotary: bool = False) -> Tensor:
    """Value interpolation ``lam * V^h + (1 - lam) * V_1^h`` on every head."""
    x, bank = _check_input(x), as_tensor(bank)
    if w.wv is None or w.wv.shape[0] != w.wq.shape[0]:
        raise ConfigurationError("ResFormer needs a local value projection for every head")
    H, dh = w.n_heads, w.head_dim
    if bank.shape[-3:-1] != (H, dh):
        raise ConfigurationError(f"value bank {bank.shape} does not match {H} heads of dim {dh}")
    slots = tuple((SlotTerm(0, h, lam), SlotTerm(1, h, 1.0 - lam)) for h in range(H))
    pos = _positions(x.shape[-1])
    q = _maybe_rope(project_heads(w.wq, x, H), rotary, pos)
    k = _maybe_rope(project_heads(w.wk, x, H), rotary, pos)
    v = assemble_heads(slots, project_heads(w.wv, x, H), {1: bank})
    out = attend(q, k, v, softmax_scale(dh))
    return x + matmul(w.wo, merge_heads(out))


def attn_gqa(x, w: AttnWeights, groups: int, skip: bool = False, bank=None,
             ratio: float = 0.5, rotary: bool = False) -> Tensor:
    """Grouped-query attention: query heads of group ``g`` share key/value head ``g``.

    ``w.wk`` holds ``groups`` key heads; ``w.wv`` holds the local value heads
    (all ``groups`` of them unless ``skip``). With ``skip`` the highest-indexed
    groups read layer 1's group value heads from ``bank`` (``(..., groups, d_H, n)``).
    """
    x = _check_input(x)
    H, dh = w.n_heads, w.head_dim
    if groups < 1 or H % groups:
        raise ConfigurationError(f"groups={groups} does not divide n_heads={H}")
    per = H // groups
    pos = _positions(x.shape[-1])
    q = _maybe_rope(project_heads(w.wq, x, H), rotary, pos)
    k = _maybe_rope(project_heads(w.wk, x, groups), rotary, pos)
    k = take(k, [h // per for h in range(H)], axis=-3)
    if skip:
        if bank is None:
            raise ConfigurationError("skip=True requires a value bank")
        bank = as_tensor(bank)
        g_local = local_head_count(groups, ratio)
        if bank.shape[-3] != groups:
            raise ConfigurationError(f"bank has {bank.shape[-3]} heads, expected {groups} group values")
        local = project_heads(w.wv, x, g_local)
        slots = tuple((SlotTerm(0, h // per),) if h // per < g_local else (SlotTerm(1, h // per),)
                      for h in range(H))
        v = assemble_heads(slots, local, {1: bank})
    else:
        v = take(project_heads(w.wv, x, groups), [h // per for h in range(H)], axis=-3)
    out = attend(q, k, v, softmax_scale(dh))
    return x + matmul(w.wo, merge_heads(out))


def mla_heads(x: Tensor, w: MLAWeights, latent: Tensor, positions) -> tuple[Tensor, Tensor, Tensor]:
    """Queries, keys and values of multi-latent attention from a full latent ``C``."""
    H = w.n_heads
    kc = project_heads(w.wuk, latent, H)
    v = project_heads(w.wuv, latent, H)
    qc = project_heads(w.wq, x, H)
    if w.rope_dim:
        kr = rope(matmul(w.wkr, x), positions)
        kr = reshape(kr, kr.shape[:-2] + (1,) + kr.shape[-2:])
        kr = take(kr, [0] * H, axis=-3)
        qr = rope(project_heads(w.wqr, x, H), positions)
        return concat([qr, qc], axis=-2), concat([kr, kc], axis=-2), v
    return qc, kc, v


def attn_mla(x, w: MLAWeights, skip: bool = False, latent_bank=None) -> tuple[Tensor, Tensor]:
    """Multi-latent attention; returns ``(Y, locally computed latent)``.

    With ``skip`` the latent is the layer's own rows (``w.wdkv`` may hold
    fewer than ``d_c`` rows) followed by the remaining rows of layer 1's
    latent ``latent_bank``.
    """
    x = _check_input(x)
    d_c = w.wuk.shape[1]
    own = matmul(w.wdkv, x)
    if skip:
        if latent_bank is None:
            raise ConfigurationError("skip=True requires the layer-1 latent")
        if d_c % 2:
            raise ConfigurationError(f"cannot halve an odd latent dimension {d_c}")
        latent_bank = as_tensor(latent_bank)
        if latent_bank.shape[-2] != d_c:
            raise ConfigurationError(f"latent bank has {latent_bank.shape[-2]} rows, expected {d_c}")
        if own.shape[-2] >= d_c:
            raise ConfigurationError("skip=True needs fewer local latent rows than d_c")
        latent = concat([own, latent_bank[..., own.shape[-2]:, :]], axis=-2)
    else:
        if own.shape[-2] != d_c:
            raise ConfigurationError(f"W_DKV has {own.shape[-2]} rows but W_UK expects {d_c}")
        latent = own
    pos = _positions(x.shape[-1])
    q, k, v = mla_heads(x, w, latent, pos)
    out = attend(q, k, v, softmax_scale(w.head_dim + w.rope_dim))
    return x + matmul(w.wo, merge_heads(out)), own


def attn_cross_kv(x, w: AttnWeights, k_source=None, v_source=None, rotary: bool = False) -> Tensor:
    """Attention with externally supplied per-head keys and/or values.

    ``k_source`` / ``v_source`` are ``(..., H, d_H, n)`` tensors taken from
    other layers; ``None`` means project locally with ``w.wk`` / ``w.wv``.
    """
    x = _check_input(x)
    H, dh, n = w.n_heads, w.head_dim, x.shape[-1]
    pos = _positions(n)
    q = _maybe_rope(project_heads(w.wq, x, H), rotary, pos)

    def resolve(src, proj, rot):
        if src is None:
            if proj is None:
                raise ConfigurationError("no local projection and no source supplied")
            return _maybe_rope(project_heads(proj, x, H), rot, pos)
        src = as_tensor(src)
        if src.shape[-1] != n:
            raise DimensionError(f"source covers {src.shape[-1]} tokens, input has {n}")
        if src.shape[-3:-1] != (H, dh):
            raise ConfigurationError(f"source {src.shape} does not match {H} heads of dim {dh}")
        return src

    k = resolve(k_source, w.wk, rotary)
    v = resolve(v_source, w.wv, False)
    out = attend(q, k, v, softmax_scale(dh))
    return x + matmul(w.wo, merge_heads(out))


def head_contributions(x, q: Tensor, k: Tensor, v: Tensor, wo: Tensor) -> list[Tensor]:
    """Per-head ``W_O^h V^h softmax(...)`` terms computed one head at a time."""
    dh = v.shape[-2]
    terms = []
    for h in range(q.shape[-3]):
        o = attend(q[..., h:h + 1, :, :], k[..., h:h + 1, :, :], v[..., h:h + 1, :, :],
                   softmax_scale(k.shape[-2]))
        terms.append(matmul(wo[:, h * dh:(h + 1) * dh], merge_heads(o)))
    return terms


def stack_sources(tensors: Sequence[Tensor]) -> Tensor:
    return concat(list(tensors), axis=-3)
