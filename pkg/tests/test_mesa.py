import numpy as np
import pytest

from skipv1lab.errors import ConfigurationError, EstimationError, NumericError, OptimizationError
from skipv1lab.mesa import (
    CopyMap, MesaParams, Moments, SequenceData, Stats, TaskSpec, build_G1, build_G2,
    construct_skip_optimum, copy_embed, effective_maps, estimate_lambda, evaluation_batch, family_loss,
    loss_L1, loss_L2, mc_mean, minimize_family, moment_loss, n_terms, optimize, predictions,
    ridge_predictor, rank_gap, sample_batch, sample_sequence, training_batch,
)
from skipv1lab.numeric import Tensor, sum as tsum


def _seq(X, Y, xq=None, yq=None):
    X, Y = np.asarray(X, float), np.asarray(Y, float)
    d = X.shape[0]
    xq = np.zeros(d) if xq is None else np.asarray(xq, float)
    yq = np.zeros(d) if yq is None else np.asarray(yq, float)
    return SequenceData(X, Y, xq, yq, np.eye(d))


def _z(diff, se):
    return abs(diff) / se


# --- sampling ------------------------------------------------------------------------

def test_noiseless_labels_are_exact():
    spec = TaskSpec.isotropic(2, 1, 5, 0.0, 1 / np.sqrt(2))
    D = sample_sequence(spec, np.random.default_rng(0))
    assert np.array_equal(spec.W0, np.eye(2))
    assert np.array_equal(D.Y - D.W_star @ D.X, np.zeros((2, 5)))
    assert not np.array_equal(D.W_star, np.eye(2))


def test_sample_covariance():
    spec = TaskSpec.isotropic(3, 1, 1, 0.1, 1.0)
    x = sample_batch(spec, np.random.default_rng(1), 100_000).X[..., 0]
    cov = x.T @ x / x.shape[0]
    se = np.sqrt((1.0 + np.eye(3)) / x.shape[0])
    assert np.all(np.abs(cov - np.eye(3)) < 3 * se)


def test_sampling_is_reproducible():
    spec = TaskSpec.isotropic(2, 1, 4, 0.1, 1.0, mc=10, seed=3)
    a, b = evaluation_batch(spec), evaluation_batch(spec)
    assert all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ("X", "Y", "x_query", "y_query"))
    assert not np.array_equal(training_batch(spec, 10).X, a.X)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        TaskSpec.isotropic(2, 3, 4, 0.1, 1.0)
    with pytest.raises(ConfigurationError):
        TaskSpec(2, 1, 4, 0.1, np.eye(3))
    with pytest.raises(ConfigurationError):
        TaskSpec.isotropic(2, 1, 4, -0.1, 1.0)


# --- ridge ---------------------------------------------------------------------------

def test_ridge_scalar_closed_form():
    D = _seq([[2.0]], [[3.0]])
    assert np.isclose(ridge_predictor(D, 0.5)[0, 0], 3.0 * 2.0 / (4.0 + 0.5), rtol=1e-15)


def test_ridge_vanishes_under_heavy_regularisation(rng):
    D = _seq(rng.standard_normal((3, 5)), rng.standard_normal((3, 5)))
    assert np.abs(ridge_predictor(D, 1e12)).max() < 1e-10


def test_ridge_matches_gradient_descent(rng):
    X, Y = rng.standard_normal((3, 8)), rng.standard_normal((3, 8))
    s2 = 0.3
    W = np.zeros((3, 3))
    lr = 1.0 / (2 * (np.linalg.eigvalsh(X @ X.T).max() + s2))
    for _ in range(20_000):
        W -= lr * (-2 * (Y - W @ X) @ X.T + 2 * s2 * W)
    assert np.allclose(ridge_predictor(_seq(X, Y), s2), W, atol=1e-8)


def test_ridge_prior_mean_shrinks_towards_it(rng):
    D = _seq(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)))
    W0 = np.array([[5.0, 1.0], [0.0, -2.0]])
    assert np.allclose(ridge_predictor(D, 1e9, prior_mean=W0), W0, atol=1e-6)


def test_ridge_singular_without_regularisation(rng):
    D = _seq(rng.standard_normal((3, 2)), rng.standard_normal((3, 2)))
    with pytest.raises(NumericError):
        ridge_predictor(D, 0.0)


# --- copy embedding and G matrices -------------------------------------------------------

def test_copy_embed_hand_assembly():
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    Y = np.array([[5.0, 6.0], [7.0, 8.0]])
    D = _seq(X, Y, xq=[9.0, 10.0])
    E = copy_embed(D, CopyMap.identity_split(2, 1))
    expect = np.array([[1.0, 1.0, 2.0, 2.0, 9.0],
                       [3.0, 7.0, 4.0, 8.0, 0.0]])
    assert np.array_equal(E, expect)


def test_copy_embed_edges(rng):
    D = _seq(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), xq=rng.standard_normal(3))
    full = copy_embed(D, CopyMap.identity_split(3, 3))
    assert np.array_equal(full[:, 1:8:2], D.X) and np.array_equal(full[:, -1], D.x_query)
    none = copy_embed(D, CopyMap.identity_split(3, 0))
    assert np.array_equal(none[:, 1:8:2], D.Y) and np.array_equal(none[:, -1], np.zeros(3))
    with pytest.raises(ConfigurationError):
        CopyMap.identity_split(3, 4)


def test_g_matrices_empty_context():
    D = _seq(np.zeros((2, 0)), np.zeros((2, 0)))
    G1, G2 = build_G2(D, CopyMap.identity_split(2, 1))
    assert np.array_equal(G1, np.zeros((2, 2))) and np.array_equal(G2, np.zeros((2, 2)))


def test_g_matrices_hand_values():
    D = _seq([[1.0], [2.0]], [[3.0], [4.0]])
    G1, G2 = build_G2(D, CopyMap.identity_split(2, 1))
    # x = (1, 2), copied z = (x_1, y_2) = (1, 4)
    assert np.array_equal(G1, [[1 + 1, 2 + 4], [2 + 4, 4 + 16]])
    assert np.array_equal(G2, [[1 + 3, 2 + 12], [2 + 4, 4 + 16]])
    assert np.array_equal(build_G1(D, CopyMap.identity_split(2, 1)), G1)


def test_g2_full_copy_matches_loop(rng):
    X, Y = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    A = rng.standard_normal((3, 3))
    _, G2 = build_G2(_seq(X, Y), CopyMap(A, np.zeros((0, 3))))
    loop = sum(np.outer(X[:, i], X[:, i]) + np.outer(Y[:, i], A @ X[:, i]) for i in range(5))
    assert np.allclose(G2, loop, atol=1e-12)


def test_predictions_match_effective_maps(rng):
    spec = TaskSpec.isotropic(3, 2, 6, 0.1, 1.0, mc=50)
    D = evaluation_batch(spec)
    params = MesaParams.random(3, 2, rng)
    for family in ("vanilla", "skip"):
        maps = effective_maps(params, D, family)
        assert np.allclose(predictions(params, D, family), np.einsum("bij,bj->bi", maps, D.x_query),
                           rtol=1e-10, atol=1e-10)


def test_n_terms_reassemble_the_maps(rng):
    spec = TaskSpec.isotropic(3, 2, 6, 0.1, 1.0, mc=20)
    D = evaluation_batch(spec)
    params = MesaParams.random(3, 2, rng)
    N = n_terms(params, D)
    assert np.allclose(N["N1"] + N["N2"] + N["N3"], effective_maps(params, D, "vanilla"), atol=1e-9)
    assert np.allclose(N["N1p"] + N["N2p"] + N["N3p"], effective_maps(params, D, "skip"), atol=1e-9)


# --- losses ------------------------------------------------------------------------------

def test_zero_params_loss():
    d, sigma = 3, 0.5
    spec = TaskSpec.isotropic(d, 2, 4, sigma, 0.0, mc=100_000, seed=2)
    est = loss_L1(MesaParams.zeros(d, 2), spec)
    assert _z(est.value - (d * d + d * sigma ** 2), est.stderr) < 3
    assert loss_L2(MesaParams.zeros(d, 2), spec).value == est.value


def test_losses_are_deterministic(rng):
    spec = TaskSpec.isotropic(2, 1, 4, 0.1, 1.0, mc=1000, seed=5)
    params = MesaParams.random(2, 1, rng)
    assert tuple(loss_L1(params, spec)) == tuple(loss_L1(params, spec))
    assert tuple(loss_L2(params, spec)) == tuple(loss_L2(params, spec))


def test_moment_loss_equals_batch_loss(rng):
    spec = TaskSpec.isotropic(3, 2, 6, 0.1, 1.0, mc=400, seed=1)
    D = evaluation_batch(spec)
    params = {k: Tensor(v) for k, v in MesaParams.random(3, 2, rng).as_dict().items()}
    for family in ("vanilla", "skip"):
        direct = family_loss(Stats.of(D), family)(params).data
        via_moments = moment_loss(Moments.of(D), family)(params).data
        assert np.isclose(direct, via_moments, rtol=1e-9)


# --- the skip construction -----------------------------------------------------------------

def test_skip_optimum_identities_per_sample(rng):
    lam = np.array([0.05, -0.02, 0.11])
    spec = TaskSpec.isotropic(3, 3, 7, 0.2, 1.0, mc=200, seed=4)
    D = evaluation_batch(spec)
    params = construct_skip_optimum(lam)
    N = n_terms(params, D)
    assert np.abs(N["N1p"]).max() < 1e-10 and np.abs(N["N2p"]).max() < 1e-10
    target = lam[:, None] * (D.Y @ np.swapaxes(D.X, -1, -2))
    assert np.allclose(N["N3p"], target, rtol=0, atol=1e-10)
    pred = np.einsum("bij,bj->bi", target, D.x_query)
    assert np.allclose(predictions(params, D, "skip"), pred, rtol=0, atol=1e-10)


def test_zero_lambda_gives_zero_predictor():
    spec = TaskSpec.isotropic(2, 2, 4, 0.1, 1.0, mc=500)
    params = construct_skip_optimum(np.zeros(2))
    assert np.array_equal(predictions(params, evaluation_batch(spec), "skip"), np.zeros((500, 2)))
    assert loss_L2(params, spec).value == loss_L2(MesaParams.zeros(2, 2), spec).value


# --- optimiser -------------------------------------------------------------------------------

def test_optimize_quadratic():
    target = np.array([[1.5, -2.0], [0.25, 3.0]])

    def quad(P):
        r = P["x"] - Tensor(target)
        return tsum(r * r)

    res = optimize(quad, {"x": np.zeros((2, 2))}, steps=3000, lr=0.05)
    assert np.abs(res.params["x"] - target).max() < 1e-4
    again = optimize(quad, {"x": np.zeros((2, 2))}, steps=3000, lr=0.05)
    assert np.array_equal(res.history, again.history)


def test_optimize_reports_divergence_step():
    with pytest.raises(OptimizationError) as info:
        optimize(lambda P: tsum(P["x"]) * np.inf, {"x": np.ones(2)}, steps=5)
    assert info.value.step == 1
    with pytest.raises(ConfigurationError):
        optimize(lambda P: tsum(P["x"]), {"x": np.ones(2)}, steps=0)


def test_skip_minimum_beats_feasible_construction():
    spec = TaskSpec.isotropic(2, 2, 8, 0.1, 1.0, mc=20_000, seed=3)
    D = evaluation_batch(spec)
    feasible = loss_L2(construct_skip_optimum(estimate_lambda(spec, D).lam), spec, D)
    found = minimize_family(spec, "skip", restarts=1, steps=1500, data=D)
    assert found.estimate.value <= feasible.value + 2 * feasible.stderr


# --- lambda -------------------------------------------------------------------------------------

def test_lambda_scalar_oracle():
    n = 8
    spec = TaskSpec.isotropic(1, 1, n, 0.0, 2.0, mc=100_000, seed=6)
    est = estimate_lambda(spec)
    assert _z(est.lam[0] - 1.0 / (n + 2), est.stderr[0]) < 3


def test_lambda_against_direct_scalar_simulation():
    n, sigma = 8, 0.05
    spec = TaskSpec.isotropic(1, 1, n, sigma, 2.0, mc=100_000, seed=8)
    est = estimate_lambda(spec)
    g = np.random.default_rng(123)
    w = 2.0 + g.standard_normal(100_000)
    x = g.standard_normal((100_000, n))
    y = w[:, None] * x + sigma * g.standard_normal((100_000, n))
    sxy, sxx = (x * y).sum(1), (x * x).sum(1)
    w_hat = sxy / (sxx + sigma ** 2)
    direct = (w_hat * sxy).mean() / (sxy ** 2).mean()
    assert abs(est.lam[0] - direct) < 4 * est.stderr[0]


def test_lambda_positive_and_symmetric():
    spec = TaskSpec.isotropic(3, 1, 10, 0.1, 3.0, mc=50_000, seed=9)
    assert spec.precondition_ok
    est = estimate_lambda(spec)
    assert np.all(est.lam > 3 * est.stderr)
    for i in range(3):
        for j in range(i + 1, 3):
            assert _z(est.lam[i] - est.lam[j], np.hypot(est.stderr[i], est.stderr[j])) < 3


def test_lambda_needs_signal():
    spec = TaskSpec.isotropic(2, 1, 0, 0.1, 1.0, mc=100)
    with pytest.raises(EstimationError):
        estimate_lambda(spec)


# --- rank gap -------------------------------------------------------------------------------------

def test_rank_gap_full_rank_is_zero():
    spec = TaskSpec.isotropic(3, 3, 6, 0.1, 1.0, mc=2000)
    assert rank_gap(spec, 3, lam=np.ones(3)).value == 0.0


def test_rank_gap_zero_rank_is_full_norm():
    spec = TaskSpec.isotropic(3, 0, 6, 0.1, 1.0, mc=2000, seed=1)
    lam = np.array([0.1, 0.2, 0.3])
    D = evaluation_batch(spec)
    direct = ((lam[:, None] * (D.Y @ np.swapaxes(D.X, -1, -2))) ** 2).sum(axis=(-2, -1)).mean()
    assert np.isclose(rank_gap(spec, 0, lam=lam).value, direct, rtol=1e-10)


def test_rank_gap_monotone_in_rank():
    spec = TaskSpec.isotropic(4, 2, 16, 0.1, 3.0, mc=20_000, seed=2)
    lam = estimate_lambda(spec).lam
    ests = [rank_gap(spec, a, lam=lam) for a in range(5)]
    for lo, hi in zip(ests, ests[1:]):
        assert hi.value <= lo.value + 2 * np.hypot(lo.stderr, hi.stderr)
    assert np.all(np.diff([e.value for e in ests]) <= 0)


# --- lemma-level properties (W0 = 0) -------------------------------------------------------------

LEMMA_SPEC = TaskSpec.isotropic(3, 2, 6, 0.3, 0.0, mc=100_000, seed=11)


@pytest.fixture(scope="module")
def lemma_data():
    return evaluation_batch(LEMMA_SPEC)


@pytest.mark.parametrize("family", ["vanilla", "skip"])
def test_ridge_decomposition_of_loss(lemma_data, family):
    D, s2 = lemma_data, LEMMA_SPEC.sigma ** 2
    params = MesaParams.random(3, 2, np.random.default_rng(0), scale=0.3)
    loss = mc_mean(((predictions(params, D, family) - D.y_query) ** 2).sum(-1))
    What = ridge_predictor(D, s2)
    c_hat = mc_mean(((np.einsum("bij,bj->bi", What, D.x_query) - D.y_query) ** 2).sum(-1))
    excess = mc_mean(((effective_maps(params, D, family) - What) ** 2).sum(axis=(-2, -1)))
    combined = np.sqrt(loss.stderr ** 2 + c_hat.stderr ** 2 + excess.stderr ** 2)
    assert _z(loss.value - c_hat.value - excess.value, combined) < 2


@pytest.mark.parametrize("family", ["vanilla", "skip"])
def test_odd_even_cross_term_vanishes(lemma_data, family):
    D = lemma_data
    params = MesaParams.random(3, 2, np.random.default_rng(1), scale=0.3)
    N = n_terms(params, D)
    odd, even = (N["N3"], N["N1"] + N["N2"]) if family == "vanilla" else (N["N3p"], N["N1p"] + N["N2p"])
    What = ridge_predictor(D, LEMMA_SPEC.sigma ** 2)
    cross = mc_mean(((What - odd) * even).sum(axis=(-2, -1)))
    assert _z(cross.value, cross.stderr) < 3


def test_ridge_first_order_optimality(lemma_data):
    D = lemma_data
    What = ridge_predictor(D, LEMMA_SPEC.sigma ** 2)
    resid = np.einsum("bij,bj->bi", What, D.x_query) - D.y_query
    grads = 2 * resid[:, :, None] * D.x_query[:, None, :]
    mean = grads.mean(0)
    se = grads.std(0, ddof=1) / np.sqrt(grads.shape[0])
    assert np.linalg.norm(mean) < 3 * np.sqrt((se ** 2).sum())


# --- theorem-level sanity ------------------------------------------------------------------------

def test_precondition_flag():
    assert TaskSpec.isotropic(4, 2, 16, 0.1, 3.0).precondition_ok
    assert not TaskSpec.isotropic(4, 2, 16, 100.0, 3.0).precondition_ok


def test_full_compression_leaves_vanilla_far_behind():
    spec = TaskSpec.isotropic(2, 2, 8, 0.1, 1.0, mc=20_000, seed=4)
    D = evaluation_batch(spec)
    vanilla = minimize_family(spec, "vanilla", restarts=1, steps=1500, data=D)
    skip = minimize_family(spec, "skip", restarts=1, steps=1500, data=D)
    assert vanilla.estimate.value > 2 * skip.estimate.value
