"""Model configuration and the attention-variant vocabulary."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum

from .errors import ConfigurationError


class VariantKind(str, Enum):
    MHA = "mha"
    SKIPV1 = "skipv1"
    RESFORMER = "resformer"
    GQA = "gqa"
    SKIPV1_GQA = "skipv1_gqa"
    MLA = "mla"
    SKIPV1_MLA = "skipv1_mla"
    YOCO_V = "yoco_v"
    CLA_V = "cla_v"
    SKIPKV1 = "skipkv1"
    SKIPV1_YOCO = "skipv1_yoco"

    @property
    def is_mla(self) -> bool:
        return self in (VariantKind.MLA, VariantKind.SKIPV1_MLA)

    @property
    def is_gqa(self) -> bool:
        return self in (VariantKind.GQA, VariantKind.SKIPV1_GQA)

    @property
    def uses_skip_ratio(self) -> bool:
        return self in (VariantKind.SKIPV1, VariantKind.SKIPV1_GQA, VariantKind.SKIPV1_MLA,
                        VariantKind.SKIPKV1, VariantKind.SKIPV1_YOCO)


class HeadInjection(str, Enum):
    SECOND_HALF = "second_half"
    POOLING = "pooling"
    DYNAMIC = "dynamic"
    ODD_EVEN = "odd_even"
    SKIPV1_PLUS_RES = "skipv1_plus_res"


def local_head_count(n_heads: int, ratio: float) -> int:
    """Heads that keep their own value projection: ``round((1 - ratio) * H)``."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigurationError(f"skip ratio must lie in [0, 1), got {ratio}")
    kept = int(round((1.0 - ratio) * n_heads))
    if kept < 1:
        raise ConfigurationError(f"skip ratio {ratio} leaves no local heads out of {n_heads}")
    return kept


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 256
    n_max: int = 256
    variant: VariantKind = VariantKind.MHA
    ratio: float = 0.5
    injection: HeadInjection = HeadInjection.SECOND_HALF
    positional: str = "learned"
    elem_bytes: int = 2
    groups: int = 0
    latent_dim: int = 0
    rope_dim: int = 0
    resformer_lambda: float = 0.5
    cla_period: int = 2
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "variant", VariantKind(self.variant))
        object.__setattr__(self, "injection", HeadInjection(self.injection))
        if self.n_layers < 1:
            raise ConfigurationError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not a multiple of n_heads={self.n_heads}")
        if self.ffn_dim < 1 or self.vocab_size < 1 or self.n_max < 1:
            raise ConfigurationError("ffn_dim, vocab_size and n_max must be positive")
        if self.positional not in ("learned", "rotary"):
            raise ConfigurationError(f"positional must be 'learned' or 'rotary', got {self.positional!r}")
        if self.positional == "rotary" and self.head_dim % 2:
            raise ConfigurationError("rotary positions need an even head dimension")
        if self.elem_bytes < 1:
            raise ConfigurationError("elem_bytes must be positive")
        kind = self.variant
        if kind.uses_skip_ratio:
            local_head_count(self.n_heads, self.ratio)
        if kind.is_gqa:
            g = self.groups or self.n_heads // 2 or 1
            object.__setattr__(self, "groups", g)
            if self.n_heads % g:
                raise ConfigurationError(f"groups={g} does not divide n_heads={self.n_heads}")
            if kind is VariantKind.SKIPV1_GQA:
                local_head_count(g, self.ratio)
        if kind.is_mla:
            if not 0 < self.latent_dim < self.d_model:
                raise ConfigurationError(f"MLA latent_dim must satisfy 0 < d_c < d, got {self.latent_dim}")
            if self.rope_dim < 0 or self.rope_dim % 2:
                raise ConfigurationError(f"MLA rope_dim must be even and >= 0, got {self.rope_dim}")
            if kind is VariantKind.SKIPV1_MLA:
                kept = (1.0 - self.ratio) * self.latent_dim
                if abs(kept - round(kept)) > 1e-9 or round(kept) < 1:
                    raise ConfigurationError(
                        f"latent_dim={self.latent_dim} cannot be split at ratio {self.ratio}")
        if kind is VariantKind.CLA_V and self.cla_period < 2:
            raise ConfigurationError(f"CLA period must be >= 2, got {self.cla_period}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def local_heads(self) -> int:
        return local_head_count(self.n_heads, self.ratio)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # line-oriented key=value form used by checkpoints and config files
    def to_lines(self) -> list[str]:
        out = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                value = value.value
            out.append(f"{f.name}={value}")
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ModelConfig":
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in mapping.items():
            if key not in fields:
                raise ConfigurationError(f"unknown model config key {key!r}")
            default = fields[key].default
            if isinstance(default, Enum) or isinstance(default, str):
                kwargs[key] = str(raw)
            elif isinstance(default, bool):
                kwargs[key] = str(raw).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)
