from fractions import Fraction

import numpy as np
import pytest
from conftest import ALL_VARIANTS, tiny_config

from skipv1lab.config import ModelConfig
from skipv1lab.errors import ConfigurationError, LengthError
from skipv1lab.kvcache import (
    REPORT_HEADER, CacheSpec, DecodeCache, bytes_per_token, cache_report, decode_sequence, decode_step,
    preset_specs, report_csv, slope_ratio,
)
from skipv1lab.model import forward, init_weights


# --- accounting ----------------------------------------------------------------------

def test_table3_gqa_bytes():
    gqa, skip = preset_specs("table3-gqa")
    assert bytes_per_token(gqa) == 98_304
    assert bytes_per_token(skip) == 74_752
    # 49,152 of keys, 2,048 of layer-1 values, 23 halved value blocks
    assert sum(skip.k_elems) * 4 == 49_152
    assert skip.v_elems[0] * 4 == 2_048 and skip.v_elems[1] * 4 == 1_024


def test_table3_mla_bytes():
    mla, uniform, layer1_full = preset_specs("table3-mla")
    assert bytes_per_token(mla) == 13_824
    assert bytes_per_token(uniform) == 7_680
    assert bytes_per_token(layer1_full) == 7_936


@pytest.mark.parametrize("L", [1, 2, 12, 24, 32])
def test_skipv1_slope_is_exact(L):
    mha = CacheSpec.from_config(ModelConfig(n_layers=L, d_model=64, n_heads=8))
    skip = CacheSpec.from_config(ModelConfig(n_layers=L, d_model=64, n_heads=8, variant="skipv1"))
    assert slope_ratio(skip, mha) == Fraction(3 * L + 1, 4 * L)


def test_slope_at_24_layers():
    mha, skip = preset_specs("mha-skipv1")
    assert slope_ratio(skip, mha) == Fraction(73, 96)
    assert round(float(slope_ratio(skip, mha)), 3) == 0.760


def test_report_zero_length_and_linearity():
    specs = preset_specs("mha-skipv1") + preset_specs("table3-gqa")
    rows = cache_report(specs, [0, 100, 200])
    by = {(r["variant"], r["seq_len"]): r["kv_bytes_total"] for r in rows}
    for spec in specs:
        assert by[(spec.variant, 0)] == 0
        assert by[(spec.variant, 200)] == 2 * by[(spec.variant, 100)]


@pytest.mark.parametrize("L", [13, 16, 24, 48])
def test_report_slope_band(L):
    specs = [CacheSpec.from_config(ModelConfig(n_layers=L, d_model=64, n_heads=8, variant=v))
             for v in ("mha", "skipv1")]
    rows = cache_report(specs, [1000, 2000])
    mha = rows[1]["kv_bytes_total"] - rows[0]["kv_bytes_total"]
    skip = rows[3]["kv_bytes_total"] - rows[2]["kv_bytes_total"]
    assert 0.75 <= skip / mha <= 0.77


def test_report_slope_at_twelve_layers_sits_just_above_band():
    specs = [CacheSpec.from_config(ModelConfig(n_layers=12, d_model=64, n_heads=8, variant=v))
             for v in ("mha", "skipv1")]
    rows = cache_report(specs, [1])
    assert Fraction(rows[1]["kv_bytes_total"], rows[0]["kv_bytes_total"]) == Fraction(37, 48)


def test_report_csv_layout():
    text = report_csv(cache_report(preset_specs("table3-gqa"), [1, 1024]), ["preset=table3-gqa"])
    lines = text.splitlines()
    assert lines[0] == "# preset=table3-gqa"
    assert lines[1] == ",".join(REPORT_HEADER)
    assert lines[2].split(",")[-1] == "98304"
    assert lines[-1] == "# element width: 4 bytes"


def test_report_rejects_bad_lengths():
    spec = preset_specs("mha-skipv1")[0]
    with pytest.raises(ValueError):
        cache_report(spec, [])
    with pytest.raises(ValueError):
        cache_report(spec, [-1])


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        CacheSpec("mha", 2, 8, 2, (1,), (1, 1))
    with pytest.raises(ConfigurationError):
        CacheSpec.from_config(tiny_config("mla"), mla_mode="half")
    with pytest.raises(ConfigurationError):
        preset_specs("table9")


# --- decoding --------------------------------------------------------------------------

@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.value)
@pytest.mark.parametrize("n", [1, 2, 17, 64])
def test_decode_matches_forward(variant, n):
    cfg = tiny_config(variant)
    for seed in range(2):
        ck = init_weights(cfg, seed, std=0.3)
        tokens = np.random.default_rng(seed).integers(0, cfg.vocab_size, n)
        logits, cache = decode_sequence(ck, tokens)
        assert cache.length == n
        assert np.allclose(logits, forward(ck, tokens).data, atol=1e-4)


@pytest.mark.parametrize("variant", ["mha", "skipv1", "skipv1_mla"])
def test_decode_rotary_and_batched(variant):
    cfg = tiny_config(variant, positional="rotary")
    ck = init_weights(cfg, 0, std=0.3)
    tokens = np.random.default_rng(0).integers(0, cfg.vocab_size, (3, 9))
    logits, _ = decode_sequence(ck, tokens)
    assert np.allclose(logits, forward(ck, tokens).data, atol=1e-4)


def test_first_step_equals_single_token_forward():
    ck = init_weights(tiny_config("skipv1"), 1, std=0.3)
    out = decode_step(ck, DecodeCache(ck.config), 5).data
    assert np.allclose(out, forward(ck, [5]).data[:, 0], atol=1e-6)


def test_identical_streams_give_identical_caches():
    ck = init_weights(tiny_config("skipv1_gqa"), 2, std=0.3)
    tokens = np.arange(20) % 13
    (la, a), (lb, b) = decode_sequence(ck, tokens), decode_sequence(ck, tokens)
    assert np.array_equal(la, lb) and a.checksum() == b.checksum()


@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.value)
def test_cache_bytes_grow_by_bytes_per_token(variant):
    cfg = tiny_config(variant)
    ck = init_weights(cfg, 0)
    spec = CacheSpec.from_config(cfg, mla_mode="layer1-full")
    cache = DecodeCache(cfg)
    for t in range(1, 6):
        decode_step(ck, cache, t)
        assert cache.nbytes() == t * bytes_per_token(spec)


def test_skip_buffer_is_stored_once():
    for L in (2, 4, 8):
        cfg = tiny_config("skipv1", n_layers=L)
        _, cache = decode_sequence(init_weights(cfg, 0), np.arange(4))
        assert cache.skip_v_buffer.shape == (2, 4, 4)
        assert sum(1 for (layer, key) in cache.buffers if key == "v" and layer == 1) == 1
    _, mha_cache = decode_sequence(init_weights(tiny_config("mha"), 0), np.arange(4))
    assert mha_cache.skip_v_buffer is None


class _Watch(DecodeCache):
    """Snapshots the skip-V buffer when layer 2 first writes in each step."""

    def __init__(self, config):
        super().__init__(config)
        self.after_layer1 = []

    def extend(self, layer, key, value):
        if layer == 2 and len(self.after_layer1) == self.length:
            self.after_layer1.append(self.skip_v_buffer.tobytes())
        return super().extend(layer, key, value)


def test_skip_buffer_untouched_after_layer_one():
    cfg = tiny_config("skipv1")
    ck = init_weights(cfg, 3, std=0.3)
    cache = _Watch(cfg)
    for t in range(6):
        decode_step(ck, cache, t)
        assert cache.after_layer1[-1] == cache.skip_v_buffer.tobytes()
    assert len(cache.after_layer1) == 6


def test_decode_errors():
    ck = init_weights(tiny_config("mha", n_max=3), 0)
    with pytest.raises(ConfigurationError):
        decode_step(ck, DecodeCache(tiny_config("skipv1")), 0)
    cache = DecodeCache(ck.config)
    for t in range(3):
        decode_step(ck, cache, t)
    with pytest.raises(LengthError):
        decode_step(ck, cache, 0)
    with pytest.raises(IndexError):
        decode_step(ck, DecodeCache(ck.config), 13)
    batched = DecodeCache(ck.config)
    decode_step(ck, batched, np.array([1, 2]))
    with pytest.raises(ConfigurationError):
        decode_step(ck, batched, np.array([1, 2, 3]))
