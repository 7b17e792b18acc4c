"""In-context linear regression with two-layer linear attention (64-bit).

A sequence holds pairs ``(x_i, y_i = W* x_i + eps_i)`` with ``x ~ N(0, I_d)``,
``W* ~ N(W0, I)`` and ``eps ~ N(0, sigma^2 I)``. After a first layer that
copies ``(A x_i; B y_i)`` next to every ``x_i``, two linear-attention heads
predict the label of the query ``x_q``:

    vanilla: sum_h W^h G1 M^h x_q
    skip:    W^1 G1 M^1 x_q + W^2 G2 M^2 x_q

with ``G1 = XX^T + [AX; BY][AX; BY]^T``, ``G2 = XX^T + Y [AX; BY]^T`` and
``M^h = R^h A`` (the key-query product acting on the compressed query
``(A x_q; 0)``). Everything is expressed through per-sequence sufficient
statistics so Monte-Carlo batches of 10^5 sequences stay cheap.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, EstimationError, NumericError, OptimizationError
from .numeric import GradTape, Tensor, concat, getitem, matmul, mean, reshape, sum as tsum, transpose

FAMILIES = ("vanilla", "skip")


@dataclass(eq=False)
class TaskSpec:
    d: int
    a: int
    n: int
    sigma: float
    W0: np.ndarray
    mc: int = 50_000
    seed: int = 0

    def __post_init__(self):
        self.W0 = np.asarray(self.W0, dtype=np.float64)
        if self.d < 1 or self.n < 0 or self.mc < 1:
            raise ConfigurationError(f"need d >= 1, n >= 0, mc >= 1; got d={self.d} n={self.n} mc={self.mc}")
        if not 0 <= self.a <= self.d:
            raise ConfigurationError(f"copy rank a={self.a} outside [0, {self.d}]")
        if self.sigma < 0:
            raise ConfigurationError(f"noise std must be >= 0, got {self.sigma}")
        if self.W0.shape != (self.d, self.d):
            raise ConfigurationError(f"W0 must be {self.d}x{self.d}, got {self.W0.shape}")

    @classmethod
    def isotropic(cls, d: int, a: int, n: int, sigma: float, w0_scale: float, mc: int = 50_000,
                  seed: int = 0) -> "TaskSpec":
        """``W0 = w0_scale * sqrt(d) * I``."""
        return cls(d, a, n, sigma, w0_scale * np.sqrt(d) * np.eye(d), mc, seed)

    @property
    def precondition_ok(self) -> bool:
        """``sigma_min(W0) > 2 sqrt(d) sigma``."""
        smin = np.linalg.svd(self.W0, compute_uv=False).min()
        return bool(smin > 2.0 * np.sqrt(self.d) * self.sigma)

    def replace(self, **kw) -> "TaskSpec":
        fields = dict(d=self.d, a=self.a, n=self.n, sigma=self.sigma, W0=self.W0, mc=self.mc, seed=self.seed)
        fields.update(kw)
        return TaskSpec(**fields)


@dataclass
class SequenceData:
    """One or a batch of sequences; leading axes index sequences."""

    X: np.ndarray        # (..., d, n)
    Y: np.ndarray        # (..., d, n)
    x_query: np.ndarray  # (..., d)
    y_query: np.ndarray  # (..., d)
    W_star: np.ndarray   # (..., d, d)

    @property
    def size(self) -> int:
        return int(np.prod(self.X.shape[:-2]))


def sample_batch(spec: TaskSpec, rng: np.random.Generator, size: int) -> SequenceData:
    d, n = spec.d, spec.n
    W = spec.W0 + rng.standard_normal((size, d, d))
    X = rng.standard_normal((size, d, n))
    Y = W @ X + spec.sigma * rng.standard_normal((size, d, n))
    xq = rng.standard_normal((size, d))
    yq = np.einsum("bij,bj->bi", W, xq) + spec.sigma * rng.standard_normal((size, d))
    return SequenceData(X, Y, xq, yq, W)


def sample_sequence(spec: TaskSpec, rng: np.random.Generator) -> SequenceData:
    b = sample_batch(spec, rng, 1)
    return SequenceData(b.X[0], b.Y[0], b.x_query[0], b.y_query[0], b.W_star[0])


def evaluation_batch(spec: TaskSpec) -> SequenceData:
    """The Monte-Carlo sample shared by every estimate of ``spec`` (common random numbers)."""
    return sample_batch(spec, np.random.default_rng(spec.seed), spec.mc)


def training_batch(spec: TaskSpec, size: int) -> SequenceData:
    return sample_batch(spec, np.random.default_rng((spec.seed, 1)), size)


# ---------------------------------------------------------------------------
# closed forms


def ridge_predictor(D: SequenceData, sigma2: float, prior_mean: np.ndarray | None = None) -> np.ndarray:
    """``(Y X^T + s W0)(X X^T + s I)^{-1}`` with ``s = sigma2``; ``W0 = 0`` by default.

    With a zero prior mean this is the posterior mean of ``W*`` given the context.
    """
    if sigma2 < 0:
        raise ConfigurationError(f"regularisation must be >= 0, got {sigma2}")
    X, Y = D.X, D.Y
    d = X.shape[-2]
    gram = X @ np.swapaxes(X, -1, -2) + sigma2 * np.eye(d)
    rhs = Y @ np.swapaxes(X, -1, -2)
    if prior_mean is not None:
        rhs = rhs + sigma2 * np.asarray(prior_mean)
    if sigma2 == 0:
        ranks = np.linalg.matrix_rank(gram)
        if np.any(ranks < d):
            raise NumericError(f"X X^T is singular (rank {int(np.min(ranks))} < {d}) and sigma2 = 0")
    # gram is symmetric, so W gram = rhs  <=>  gram W^T = rhs^T
    return np.swapaxes(np.linalg.solve(gram, np.swapaxes(rhs, -1, -2)), -1, -2)


@dataclass
class CopyMap:
    A: np.ndarray  # (a, d)
    B: np.ndarray  # (d - a, d)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.B = np.asarray(self.B, dtype=np.float64).reshape(-1, self.A.shape[1])
        d = self.A.shape[1]
        if self.A.shape[0] + self.B.shape[0] != d:
            raise ConfigurationError(f"A rows + B rows must equal d={d}, got {self.A.shape[0]} + {self.B.shape[0]}")

    @property
    def a(self) -> int:
        return self.A.shape[0]

    @classmethod
    def identity_split(cls, d: int, a: int) -> "CopyMap":
        if not 0 <= a <= d:
            raise ConfigurationError(f"copy rank a={a} outside [0, {d}]")
        eye = np.eye(d)
        return cls(eye[:a], eye[a:])


def copy_embed(D: SequenceData, cmap: CopyMap) -> np.ndarray:
    """The first block's output: columns ``x_1, (Ax_1; By_1), ..., x_n, (Ax_n; By_n), (Ax_q; 0)``."""
    X, Y = D.X, D.Y
    d, n = X.shape[-2:]
    if cmap.A.shape[1] != d:
        raise ConfigurationError(f"copy map acts on dimension {cmap.A.shape[1]}, data has d={d}")
    Z = np.concatenate([cmap.A @ X, cmap.B @ Y], axis=-2)
    out = np.empty(X.shape[:-1] + (2 * n + 1,))
    out[..., 0:2 * n:2] = X
    out[..., 1:2 * n:2] = Z
    q = np.concatenate([cmap.A @ D.x_query[..., None], np.zeros(D.x_query.shape[:-1] + (d - cmap.a, 1))],
                       axis=-2)
    out[..., -1] = q[..., 0]
    return out


def _copied(D: SequenceData, cmap: CopyMap) -> np.ndarray:
    return np.concatenate([cmap.A @ D.X, cmap.B @ D.Y], axis=-2)


def build_G1(D: SequenceData, cmap: CopyMap) -> np.ndarray:
    """``sum_i x_i x_i^T + (Ax_i; By_i)(Ax_i; By_i)^T``."""
    Z = _copied(D, cmap)
    return D.X @ np.swapaxes(D.X, -1, -2) + Z @ np.swapaxes(Z, -1, -2)


def build_G2(D: SequenceData, cmap: CopyMap) -> tuple[np.ndarray, np.ndarray]:
    """``(G1, sum_i x_i x_i^T + y_i (Ax_i; By_i)^T)``: the skip head sees raw labels."""
    Z = _copied(D, cmap)
    G2 = D.X @ np.swapaxes(D.X, -1, -2) + D.Y @ np.swapaxes(Z, -1, -2)
    return build_G1(D, cmap), G2


# ---------------------------------------------------------------------------
# parameters and predictors


@dataclass
class MesaParams:
    """``W``: (2, d, d) value maps; ``R``: (2, d, a) with ``M^h = R^h A``; copy map ``A``, ``B``."""

    W: np.ndarray
    R: np.ndarray
    A: np.ndarray
    B: np.ndarray

    NAMES = ("W", "R", "A", "B")

    def __post_init__(self):
        for name in self.NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d = self.W.shape[-1]
        a = self.A.shape[0]
        if self.W.shape != (2, d, d) or self.R.shape != (2, d, a) or self.A.shape != (a, d) \
                or self.B.shape != (d - a, d):
            raise ConfigurationError(
                f"inconsistent shapes W{self.W.shape} R{self.R.shape} A{self.A.shape} B{self.B.shape}")

    @property
    def d(self) -> int:
        return self.W.shape[-1]

    @property
    def a(self) -> int:
        return self.A.shape[0]

    @property
    def M(self) -> np.ndarray:
        return self.R @ self.A

    @property
    def copy_map(self) -> CopyMap:
        return CopyMap(self.A, self.B)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.NAMES}

    @classmethod
    def from_dict(cls, values: dict) -> "MesaParams":
        return cls(*(np.asarray(values[k].data if isinstance(values[k], Tensor) else values[k])
                     for k in cls.NAMES))

    @classmethod
    def zeros(cls, d: int, a: int) -> "MesaParams":
        return cls(np.zeros((2, d, d)), np.zeros((2, d, a)), np.zeros((a, d)), np.zeros((d - a, d)))

    @classmethod
    def random(cls, d: int, a: int, rng: np.random.Generator, scale: float = 1.0) -> "MesaParams":
        s = scale / np.sqrt(d)
        return cls(s * rng.standard_normal((2, d, d)), s * rng.standard_normal((2, d, a)),
                   s * rng.standard_normal((a, d)), s * rng.standard_normal((d - a, d)))


@dataclass
class Stats:
    """Per-sequence sufficient statistics of the context."""

    Sxx: np.ndarray
    Sxy: np.ndarray
    Syx: np.ndarray
    Syy: np.ndarray
    xq: np.ndarray
    yq: np.ndarray

    @classmethod
    def of(cls, D: SequenceData) -> "Stats":
        Xt, Yt = np.swapaxes(D.X, -1, -2), np.swapaxes(D.Y, -1, -2)
        Sxy = D.X @ Yt
        return cls(D.X @ Xt, Sxy, np.swapaxes(Sxy, -1, -2), D.Y @ Yt, D.x_query, D.y_query)


def predict(P: dict, S: Stats, family: str) -> Tensor:
    """Query predictions ``(N, d, 1)``; ``P`` maps parameter names to Tensors."""
    if family not in FAMILIES:
        raise ConfigurationError(f"family must be one of {FAMILIES}, got {family!r}")
    W, R, A, B = (P[k] for k in MesaParams.NAMES)
    a = A.shape[0]
    At, Bt = transpose(A), transpose(B)
    xq = Tensor(S.xq[..., None])
    Sxx, Sxy, Syx, Syy = (Tensor(m) for m in (S.Sxx, S.Sxy, S.Syx, S.Syy))
    u = matmul(A, xq)                                    # compressed query (N, a, 1)
    out = None
    for h in range(2):
        m = matmul(getitem(R, h), u)                     # M^h x_q
        t1 = matmul(At, getitem(m, (Ellipsis, slice(0, a), slice(None))))
        t2 = matmul(Bt, getitem(m, (Ellipsis, slice(a, None), slice(None))))
        g = matmul(Sxx, m)
        if family == "skip" and h == 1:
            g = g + matmul(Syx, t1) + matmul(Syy, t2)
        else:
            top = matmul(A, matmul(Sxx, t1) + matmul(Sxy, t2))
            bottom = matmul(B, matmul(Syx, t1) + matmul(Syy, t2))
            g = g + concat([top, bottom], axis=-2)
        term = matmul(getitem(W, h), g)
        out = term if out is None else out + term
    return out


def predictions(params: MesaParams, D: SequenceData, family: str) -> np.ndarray:
    P = {k: Tensor(v) for k, v in params.as_dict().items()}
    return predict(P, Stats.of(D), family).data[..., 0]


def effective_maps(params: MesaParams, D: SequenceData, family: str) -> np.ndarray:
    """Per-sequence ``sum_h W^h G^h M^h``; the prediction is this map applied to ``x_q``."""
    cmap = params.copy_map
    G1, G2 = build_G2(D, cmap)
    M = params.M
    second = G2 if family == "skip" else G1
    return params.W[0] @ G1 @ M[0] + params.W[1] @ second @ M[1]


def n_terms(params: MesaParams, D: SequenceData) -> dict[str, np.ndarray]:
    """Y-even (N1, N2) and Y-odd (N3) parts of both models' effective maps.

    Primed entries (``N1p`` ...) belong to the skip model. ``W`` is split by
    columns and ``M`` by rows at the copy rank ``a``.
    """
    a = params.a
    A, B, W, M = params.A, params.B, params.W, params.M
    X, Y = D.X, D.Y
    Xt, Yt = np.swapaxes(X, -1, -2), np.swapaxes(Y, -1, -2)
    W1, W2 = W[:, :, :a], W[:, :, a:]
    M1, M2 = M[:, :a, :], M[:, a:, :]
    XX, AX, BY = X @ Xt, A @ X, B @ Y
    AXt, BYt = np.swapaxes(AX, -1, -2), np.swapaxes(BY, -1, -2)
    N1 = sum(W[h] @ XX @ M[h] + W1[h] @ AX @ AXt @ M1[h] for h in range(2))
    N2 = sum(W2[h] @ BY @ BYt @ M2[h] for h in range(2))
    N3 = sum(W1[h] @ AX @ BYt @ M2[h] + W2[h] @ BY @ AXt @ M1[h] for h in range(2))
    N1p = W[0] @ XX @ M[0] + W[1] @ XX @ M[1] + W1[0] @ AX @ AXt @ M1[0]
    N2p = W2[0] @ BY @ BYt @ M2[0] + W[1] @ Y @ BYt @ M2[1]
    N3p = W1[0] @ AX @ BYt @ M2[0] + W2[0] @ BY @ AXt @ M1[0] + W[1] @ Y @ AXt @ M1[1]
    return {"N1": N1, "N2": N2, "N3": N3, "N1p": N1p, "N2p": N2p, "N3p": N3p}


def construct_skip_optimum(lam) -> MesaParams:
    """``A = I``, ``B`` empty, ``W^1 = -Lambda/2``, ``W^2 = Lambda``, ``M^1 = M^2 = I``.

    The even parts cancel (``-1/2 + 1 - 1/2``) and the skip model's effective
    map becomes ``Lambda Y X^T`` for every sequence.
    """
    lam = np.asarray(lam, dtype=np.float64)
    Lam = np.diag(lam) if lam.ndim == 1 else lam
    d = Lam.shape[0]
    eye = np.eye(d)
    return MesaParams(np.stack([-0.5 * Lam, Lam]), np.stack([eye, eye]), eye.copy(), np.zeros((0, d)))


# ---------------------------------------------------------------------------
# Monte-Carlo losses


@dataclass
class Estimate:
    value: float
    stderr: float
    samples: np.ndarray = field(repr=False, default=None)

    def __iter__(self):
        return iter((self.value, self.stderr))


def mc_mean(values: np.ndarray) -> Estimate:
    values = np.asarray(values, dtype=np.float64)
    se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else float("inf")
    return Estimate(float(values.mean()), se, values)


def per_sample_loss(params: MesaParams, D: SequenceData, family: str) -> np.ndarray:
    p = predictions(params, D, family)
    return ((p - D.y_query) ** 2).sum(axis=-1)


def _loss(params: MesaParams, spec: TaskSpec, family: str, data: SequenceData | None) -> Estimate:
    D = data if data is not None else evaluation_batch(spec)
    return mc_mean(per_sample_loss(params, D, family))


def loss_L1(params: MesaParams, spec: TaskSpec, data: SequenceData | None = None) -> Estimate:
    """Vanilla two-head loss on the task's shared Monte-Carlo sample."""
    return _loss(params, spec, "vanilla", data)


def loss_L2(params: MesaParams, spec: TaskSpec, data: SequenceData | None = None) -> Estimate:
    """Skip-model loss on the same sample as :func:`loss_L1`."""
    return _loss(params, spec, "skip", data)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizeResult:
    params: dict[str, np.ndarray]
    loss: float
    best_step: int
    history: np.ndarray


def optimize(loss_fn: Callable[[dict], Tensor], init, steps: int = 5000, lr: float = 1e-2,
             betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> OptimizeResult:
    """Adam on a deterministic functional; returns the best parameters seen.

    ``loss_fn`` receives a dict of Tensors. ``init`` is such a dict of arrays
    or a :class:`MesaParams`.
    """
    if steps < 1:
        raise ConfigurationError(f"steps must be >= 1, got {steps}")
    values = init.as_dict() if isinstance(init, MesaParams) else init
    theta = {k: np.array(v, dtype=np.float64, copy=True) for k, v in values.items()}
    m1 = {k: np.zeros_like(v) for k, v in theta.items()}
    m2 = {k: np.zeros_like(v) for k, v in theta.items()}
    b1, b2 = betas
    best, best_loss, best_step = None, np.inf, 0
    history = np.empty(steps)
    names = list(theta)
    for step in range(1, steps + 1):
        P = {k: Tensor(v, requires_grad=True) for k, v in theta.items()}
        with GradTape() as tape:
            loss = loss_fn(P)
        value = float(loss.data)
        if not np.isfinite(value):
            raise OptimizationError(f"loss diverged at step {step}", step=step)
        history[step - 1] = value
        if value < best_loss:
            best_loss, best_step = value, step
            best = {k: v.copy() for k, v in theta.items()}
        grads = tape.gradient(loss, [P[k] for k in names])
        for k, g in zip(names, grads):
            m1[k] = b1 * m1[k] + (1 - b1) * g
            m2[k] = b2 * m2[k] + (1 - b2) * g * g
            mhat = m1[k] / (1 - b1 ** step)
            vhat = m2[k] / (1 - b2 ** step)
            theta[k] = theta[k] - lr * mhat / (np.sqrt(vhat) + eps)
    P = {k: Tensor(v) for k, v in theta.items()}
    final = float(loss_fn(P).data)
    if np.isfinite(final) and final < best_loss:
        best_loss, best_step, best = final, steps + 1, theta
    return OptimizeResult(best, best_loss, best_step, history)


def family_loss(stats: Stats, family: str) -> Callable[[dict], Tensor]:
    yq = Tensor(stats.yq[..., None])

    def loss(P: dict) -> Tensor:
        r = predict(P, stats, family) - yq
        return mean(tsum(r * r, axis=(-2, -1)))

    return loss


@dataclass
class Moments:
    """Second moments of the features ``phi = S (x) x_q`` and of the targets.

    ``S`` is the joint context Gram matrix ``[X; Y][X; Y]^T``. Every
    prediction is linear in ``phi``, so the mean squared error over a fixed
    batch is the quadratic ``tr(K C K^T) - 2 tr(K c) + e`` in the map ``K``
    built from the parameters; no per-sequence work remains in the loop.
    """

    C: np.ndarray
    c: np.ndarray
    e: float
    d: int

    @classmethod
    def of(cls, D: SequenceData) -> "Moments":
        Z = np.concatenate([D.X, D.Y], axis=-2)
        S = Z @ np.swapaxes(Z, -1, -2)
        phi = np.einsum("brs,bk->brsk", S, D.x_query).reshape(S.shape[0], -1)
        N = phi.shape[0]
        return cls(phi.T @ phi / N, phi.T @ D.y_query / N, float((D.y_query ** 2).sum() / N), D.X.shape[-2])


def feature_map(P: dict, d: int, family: str) -> Tensor:
    """``K`` with ``prediction = K phi``, shape ``(d, (2d)^2 d)``."""
    W, R, A, B = (P[k] for k in MesaParams.NAMES)
    a = A.shape[0]
    eye, zero = np.eye(d), np.zeros((d, d))
    x_sel, y_sel = Tensor(np.hstack([eye, zero])), Tensor(np.hstack([zero, eye]))
    copy = concat([concat([A, Tensor(np.zeros((a, d)))], axis=1),
                   concat([Tensor(np.zeros((d - a, d))), B], axis=1)], axis=0)
    K = None
    for h in range(2):
        Q = matmul(getitem(R, h), A)
        Wh = getitem(W, h)
        left = y_sel if family == "skip" and h == 1 else copy
        for lsel, rsel in ((x_sel, x_sel), (left, copy)):
            outer = matmul(reshape(matmul(Wh, lsel), (2 * d * d, 1)),
                           reshape(matmul(transpose(rsel), Q), (1, 2 * d * d)))
            K = outer if K is None else K + outer
    return reshape(K, (d, 4 * d ** 3))


def moment_loss(moments: Moments, family: str) -> Callable[[dict], Tensor]:
    C, c = Tensor(moments.C), Tensor(moments.c.T)

    def loss(P: dict) -> Tensor:
        K = feature_map(P, moments.d, family)
        return tsum(matmul(K, C) * K) - 2.0 * tsum(K * c) + moments.e

    return loss


@dataclass
class Minimum:
    family: str
    a: int
    params: MesaParams
    train_loss: float
    estimate: Estimate
    restarts: list[float]


def minimize_family(spec: TaskSpec, family: str, a: int | None = None, restarts: int = 3,
                    steps: int = 5000, lr: float = 1e-2, train_size: int = 8192,
                    init_scale: float = 0.5, data: SequenceData | None = None) -> Minimum:
    """Best of ``restarts`` Adam runs on a fixed training sample, scored on the shared MC sample."""
    a = spec.a if a is None else a
    fn = moment_loss(Moments.of(training_batch(spec, train_size)), family)
    best, finals = None, []
    for r in range(restarts):
        init = MesaParams.random(spec.d, a, np.random.default_rng((spec.seed, 2, r)), init_scale)
        res = optimize(fn, init, steps=steps, lr=lr)
        finals.append(res.loss)
        if best is None or res.loss < best.loss:
            best = res
    params = MesaParams.from_dict(best.params)
    est = _loss(params, spec, family, data)
    return Minimum(family, a, params, best.loss, est, finals)


# ---------------------------------------------------------------------------
# lambda, rank gap, theorem report


@dataclass
class LambdaEstimate:
    lam: np.ndarray
    stderr: np.ndarray


def lambda_moments(D: SequenceData, sigma2: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample numerator ``(W_hat)_i X Y_i^T`` and denominator ``|X Y_i^T|^2``, shape (N, d)."""
    What = ridge_predictor(D, sigma2)
    XY = D.X @ np.swapaxes(D.Y, -1, -2)                 # column i is X Y_i^T
    num = np.einsum("bij,bji->bi", What, XY)
    den = (XY ** 2).sum(axis=-2)
    return num, den


def estimate_lambda(spec: TaskSpec, data: SequenceData | None = None) -> LambdaEstimate:
    """Ratio-of-means estimate of the diagonal ``Lambda`` with delta-method errors."""
    D = data if data is not None else evaluation_batch(spec)
    num, den = lambda_moments(D, spec.sigma ** 2)
    N = num.shape[0]
    mden = den.mean(axis=0)
    se_den = den.std(axis=0, ddof=1) / np.sqrt(N)
    if np.any(mden <= 3 * se_den):
        raise EstimationError("lambda denominator is not distinguishable from zero")
    lam = num.mean(axis=0) / mden
    resid = num - lam * den
    stderr = resid.std(axis=0, ddof=1) / np.sqrt(N) / mden
    return LambdaEstimate(lam, stderr)


def rank_gap(spec: TaskSpec, a: int | None = None, lam: np.ndarray | None = None,
             data: SequenceData | None = None) -> Estimate:
    """``E sum_{i > a} sigma_i^2(Lambda Y X^T)``: the best rank-``a`` approximation error."""
    a = spec.a if a is None else a
    if not 0 <= a <= spec.d:
        raise ConfigurationError(f"rank {a} outside [0, {spec.d}]")
    D = data if data is not None else evaluation_batch(spec)
    if lam is None:
        lam = estimate_lambda(spec, D).lam
    target = np.asarray(lam)[:, None] * (D.Y @ np.swapaxes(D.X, -1, -2))
    sv = np.linalg.svd(target, compute_uv=False)
    return mc_mean((sv[:, a:] ** 2).sum(axis=-1))


@dataclass
class TheoremReport:
    L1_min: float
    L1_stderr: float
    L2_min: float
    L2_stderr: float
    gap: float
    gap_stderr: float
    c_lower: float
    c_stderr: float
    precondition_ok: bool
    a: int
    skip_a: int
    failed: list[str] = field(default_factory=list)

    @property
    def gap_z(self) -> float:
        return self.gap / self.gap_stderr if self.gap_stderr > 0 else float("inf")

    @property
    def c_z(self) -> float:
        return self.c_lower / self.c_stderr if self.c_stderr > 0 else float("inf")

    FIELDS = ("L1_min", "L1_stderr", "L2_min", "L2_stderr", "gap", "gap_stderr", "c_lower", "c_stderr",
              "precondition_ok", "a", "skip_a")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def verify_theorem(spec: TaskSpec, restarts: int = 3, steps: int = 5000, lr: float = 1e-2,
                   train_size: int = 8192) -> TheoremReport:
    """Optimise both models and compare their minima on one shared MC sample.

    The vanilla model keeps the task's copy rank ``a``; the skip model is
    given the uncompressed copy (``a = d``), the setting in which its
    optimum realises ``Lambda Y X^T``. The gap's error uses paired
    per-sequence differences.
    """
    D = evaluation_batch(spec)
    failed: list[str] = []
    mins: dict[str, Minimum | None] = {}
    for family, a in (("vanilla", spec.a), ("skip", spec.d)):
        try:
            mins[family] = minimize_family(spec, family, a, restarts, steps, lr, train_size, data=D)
        except OptimizationError as exc:
            failed.append(f"{family}: {exc}")
            mins[family] = None
    nan = float("nan")
    v, s = mins["vanilla"], mins["skip"]
    if v is not None and s is not None:
        gap = mc_mean(v.estimate.samples - s.estimate.samples)
    else:
        gap = Estimate(nan, nan)
    try:
        c = rank_gap(spec, spec.a, data=D)
    except EstimationError as exc:
        failed.append(f"rank gap: {exc}")
        c = Estimate(nan, nan)
    return TheoremReport(
        L1_min=v.estimate.value if v else nan, L1_stderr=v.estimate.stderr if v else nan,
        L2_min=s.estimate.value if s else nan, L2_stderr=s.estimate.stderr if s else nan,
        gap=gap.value, gap_stderr=gap.stderr, c_lower=c.value, c_stderr=c.stderr,
        precondition_ok=spec.precondition_ok, a=spec.a, skip_a=spec.d, failed=failed)
