"""Acceptance suite: one or more tests per criterion, summarised at the end of the run."""
import io
import time
from fractions import Fraction

import numpy as np
import pytest
from conftest import ALL_VARIANTS, tiny_config

from skipv1lab.config import ModelConfig
from skipv1lab.convert import convert
from skipv1lab.harness.cli import main
from skipv1lab.harness.data import ingest
from skipv1lab.harness.train import TrainConfig, desk_model, evaluate, train
from skipv1lab.kvcache import CacheSpec, bytes_per_token, decode_sequence, preset_specs, slope_ratio
from skipv1lab.mesa import (
    MesaParams, TaskSpec, construct_skip_optimum, effective_maps, evaluation_batch, mc_mean, n_terms,
    predictions, rank_gap, ridge_predictor,
)
from skipv1lab.model import block_prefix, forward, init_weights, param_count, window_loss
from skipv1lab.numeric import GradTape, Tensor, finite_diff_grad, relative_error

pytestmark = pytest.mark.slow

DESK_VARIANTS = ("mha", "skipv1")


def _timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


# --- shared runs -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus():
    return ingest()


def _desk_runs(corpus, root):
    runs = {}
    for variant in DESK_VARIANTS:
        cfg = TrainConfig(model=desk_model(variant=variant))
        (ck, log), seconds = _timed(train, cfg, corpus, out_dir=str(root / variant))
        runs[variant] = dict(ck=ck, log=log, seconds=seconds)
    return runs


@pytest.fixture(scope="module")
def desk_runs(corpus, tmp_path_factory):
    return _desk_runs(corpus, tmp_path_factory.mktemp("desk"))


def _decode_errors() -> str:
    buf = io.StringIO()
    buf.write("variant,seed,max_abs_err\n")
    for variant in ALL_VARIANTS:
        cfg = tiny_config(variant)
        for seed in range(10):
            ck = init_weights(cfg, seed, std=0.3)
            tokens = np.random.default_rng(seed).integers(0, cfg.vocab_size, 64)
            logits, _ = decode_sequence(ck, tokens)
            err = float(np.abs(logits[:, -1] - forward(ck, tokens).data[:, -1]).max())
            buf.write(f"{variant.value},{seed},{err!r}\n")
    return buf.getvalue()


MESA_ARGS = ["mesa", "--d", "4", "--a", "2", "--n", "16", "--sigma", "0.1", "--w0-scale", "3",
             "--mc", "50000", "--seed", "7", "--restarts", "3", "--steps", "5000"]


def _mesa_csv(out_dir) -> str:
    assert main([*MESA_ARGS, "--out-dir", str(out_dir)]) == 0
    return (out_dir / "mesa.csv").read_text()


@pytest.fixture(scope="module")
def mesa_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("mesa")
    text, seconds = _timed(_mesa_csv, out)
    return text, seconds


def _mesa_row(text: str) -> dict[str, str]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return dict(zip(lines[0].split(","), lines[1].split(",")))


# --- 1: cache accounting ---------------------------------------------------------------------

@pytest.mark.criterion(1, "cache accounting reproduces the four bytes-per-token values")
def test_c1_cache_accounting():
    t0 = time.perf_counter()
    gqa, skip_gqa = preset_specs("table3-gqa")
    mla, skip_mla = preset_specs("table3-mla")[:2]
    assert (gqa.elem_bytes, mla.elem_bytes) == (4, 2)
    assert skip_mla.mla_mode == "uniform"
    assert [bytes_per_token(s) for s in (gqa, skip_gqa, mla, skip_mla)] == [98_304, 74_752, 13_824, 7_680]
    assert time.perf_counter() - t0 < 1.0


# --- 2: slope --------------------------------------------------------------------------------

@pytest.mark.criterion(2, "SkipV1/MHA per-token bytes equal (3L+1)/(4L) exactly")
@pytest.mark.parametrize("L", [2, 12, 24, 32])
def test_c2_slope(L):
    mha = CacheSpec.from_config(ModelConfig(n_layers=L, d_model=1024, n_heads=16, vocab_size=8, n_max=8))
    skip = CacheSpec.from_config(ModelConfig(n_layers=L, d_model=1024, n_heads=16, vocab_size=8, n_max=8,
                                             variant="skipv1"))
    ratio = slope_ratio(skip, mha)
    assert ratio == Fraction(3 * L + 1, 4 * L)
    if L == 24:
        assert ratio == Fraction(73, 96) and abs(float(ratio) - 0.760) < 5e-4


# --- 3: parameters -------------------------------------------------------------------------

def _table3(variant):
    return ModelConfig(n_layers=24, d_model=1024, n_heads=16, ffn_dim=4096, vocab_size=50257, n_max=1024,
                       variant=variant, groups=8)


@pytest.mark.criterion(3, "W_V delta of 6,029,312 and GQA preset totals within 2%")
def test_c3_parameters():
    t0 = time.perf_counter()
    skip = param_count(_table3("skipv1_gqa"))
    assert skip["delta_vs_base"] == -6_029_312 == -23 * 1024 * 256
    base = param_count(_table3("gqa"))
    assert base["value_proj"] - skip["value_proj"] == 6_029_312
    assert abs(base["total"] - 334.7e6) / 334.7e6 < 0.02
    assert abs(skip["total"] - 328.9e6) / 328.9e6 < 0.02
    assert time.perf_counter() - t0 < 1.0


# --- 4: decode equivalence ---------------------------------------------------------------------

@pytest.mark.criterion(4, "step-by-step decode matches forward within 1e-4 for every variant")
def test_c4_decode_equivalence():
    text, seconds = _timed(_decode_errors)
    rows = [ln.split(",") for ln in text.splitlines()[1:]]
    assert len(rows) == 10 * len(ALL_VARIANTS)
    worst = max(float(r[2]) for r in rows)
    assert worst < 1e-4, worst
    assert seconds < 30


# --- 5: gradients ------------------------------------------------------------------------------

def _grads(ck, windows, dtype):
    P = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in ck.tensors.items()}
    with GradTape() as tape:
        loss = window_loss(ck, windows, params=P)
    return dict(zip(P, tape.gradient(loss, list(P.values()))))


@pytest.mark.criterion(5, "every trainable tensor matches central differences (1e-3 f32, 1e-6 f64)")
def test_c5_gradients():
    t0 = time.perf_counter()
    for variant in ALL_VARIANTS:
        cfg = tiny_config(variant, n_layers=2, ffn_dim=16, vocab_size=7, n_max=8)
        assert cfg.d_model == 16
        ck = init_weights(cfg, 0, std=0.3)
        windows = np.random.default_rng(1).integers(0, 7, (2, 6))
        g32, g64 = _grads(ck, windows, np.float32), _grads(ck, windows, np.float64)
        base = {k: v.astype(np.float64) for k, v in ck.tensors.items()}
        for name in base:
            def f(t, name=name):
                P = dict(base)
                P[name] = t
                return window_loss(ck, windows, params=P)

            fd = finite_diff_grad(f, base[name], h=1e-6)
            assert relative_error(g32[name], fd) < 1e-3, (variant.value, name)
            assert relative_error(g64[name], fd) < 1e-6, (variant.value, name)
    assert time.perf_counter() - t0 < 120


# --- 6: theorem ------------------------------------------------------------------------------------

@pytest.mark.criterion(6, "L2_min < L1_min at >= 3 stderr and rank gap > 0 at >= 3 stderr")
def test_c6_theorem(mesa_run):
    text, seconds = mesa_run
    row = _mesa_row(text)
    assert row["precondition_ok"] == "true"
    L1, L2 = float(row["L1_min"]), float(row["L2_min"])
    gap, gap_se = float(row["gap"]), float(row["gap_stderr"])
    c, c_se = float(row["c_lower"]), float(row["c_stderr"])
    assert L2 < L1
    assert gap > 3 * gap_se
    assert c > 3 * c_se
    assert seconds < 600


# --- 7: lemma oracles ------------------------------------------------------------------------------

@pytest.mark.criterion(7, "ridge decomposition, skip construction and ridge optimality oracles")
def test_c7_lemmas():
    t0 = time.perf_counter()
    spec = TaskSpec.isotropic(3, 2, 6, 0.3, 0.0, mc=100_000, seed=11)
    D = evaluation_batch(spec)
    s2 = spec.sigma ** 2
    What = ridge_predictor(D, s2)
    ridge_pred = np.einsum("bij,bj->bi", What, D.x_query)
    c_hat = mc_mean(((ridge_pred - D.y_query) ** 2).sum(-1))
    params = MesaParams.random(3, 2, np.random.default_rng(0), scale=0.3)
    for family in ("vanilla", "skip"):
        loss = mc_mean(((predictions(params, D, family) - D.y_query) ** 2).sum(-1))
        excess = mc_mean(((effective_maps(params, D, family) - What) ** 2).sum(axis=(-2, -1)))
        se = np.sqrt(loss.stderr ** 2 + c_hat.stderr ** 2 + excess.stderr ** 2)
        assert abs(loss.value - c_hat.value - excess.value) < 2 * se, family

    full = spec.replace(a=3, mc=2000)
    Dq = evaluation_batch(full)
    lam = np.array([0.04, 0.05, 0.06])
    opt = construct_skip_optimum(lam)
    N = n_terms(opt, Dq)
    assert np.abs(N["N1p"]).max() < 1e-10 and np.abs(N["N2p"]).max() < 1e-10
    target = lam[:, None] * (Dq.Y @ np.swapaxes(Dq.X, -1, -2))
    assert np.abs(predictions(opt, Dq, "skip") - np.einsum("bij,bj->bi", target, Dq.x_query)).max() < 1e-10

    grads = 2 * (ridge_pred - D.y_query)[:, :, None] * D.x_query[:, None, :]
    se = grads.std(0, ddof=1) / np.sqrt(grads.shape[0])
    assert np.linalg.norm(grads.mean(0)) < 3 * np.sqrt((se ** 2).sum())
    assert rank_gap(full, 3, lam=lam, data=Dq).value == 0.0
    assert time.perf_counter() - t0 < 120


# --- 8: conversion -----------------------------------------------------------------------------------

@pytest.mark.criterion(8, "MeanV from the trained MHA run beats a random SkipV1; SVD oracle to 1e-5")
def test_c8_conversion(desk_runs, corpus):
    t0 = time.perf_counter()
    mha = desk_runs["mha"]["ck"]
    converted = convert(mha, "meanv")
    random_skip = init_weights(mha.config.replace(variant="skipv1"), 0)
    meanv_loss, _ = evaluate(converted, corpus, seq_len=64, limit=64)
    random_loss, _ = evaluate(random_skip, corpus, seq_len=64, limit=64)
    assert meanv_loss < random_loss, (meanv_loss, random_loss)

    ck = init_weights(ModelConfig(n_layers=2, d_model=8, n_heads=4, ffn_dim=16, vocab_size=11, n_max=8), 3,
                      std=0.5)
    out = convert(ck, "svd")
    p = block_prefix(2)
    product = ck[p + "attn.wo"].astype(np.float64) @ ck[p + "attn.wv"].astype(np.float64)
    u, s, vt = np.linalg.svd(product)
    oracle = (u[:, :4] * s[:4]) @ vt[:4]
    local = out[p + "attn.wo"][:, :4].astype(np.float64) @ out[p + "attn.wv"].astype(np.float64)
    assert np.abs(local - oracle).max() < 1e-5
    assert time.perf_counter() - t0 + desk_runs["mha"]["seconds"] < 300


# --- 9: training parity ---------------------------------------------------------------------------------

@pytest.mark.criterion(9, "desk runs cut validation loss by >= 20%; SkipV1 within 5% of MHA")
def test_c9_training_parity(desk_runs):
    finals = {}
    for variant, run in desk_runs.items():
        log = run["log"]
        assert log.rows[-1]["step"] == 2000
        start, final = log.rows[0]["val_loss"], log.final_val_loss
        assert np.isfinite(final) and final <= 0.8 * start, (variant, start, final)
        finals[variant] = final
    assert abs(finals["skipv1"] - finals["mha"]) / finals["mha"] <= 0.05, finals
    assert sum(run["seconds"] for run in desk_runs.values()) < 900


# --- 10: determinism --------------------------------------------------------------------------------------

@pytest.mark.criterion(10, "repeating criteria 4, 6 and 9 gives byte-identical CSV")
def test_c10_determinism(desk_runs, mesa_run, corpus, tmp_path):
    assert _decode_errors() == _decode_errors()
    assert _mesa_csv(tmp_path) == mesa_run[0]
    again = _desk_runs(corpus, tmp_path)
    for variant in DESK_VARIANTS:
        first = desk_runs[variant]["log"].to_csv(wall_time=False)
        assert again[variant]["log"].to_csv(wall_time=False) == first
        assert all(again[variant]["ck"][k].tobytes() == desk_runs[variant]["ck"][k].tobytes()
                   for k in desk_runs[variant]["ck"].tensors)
