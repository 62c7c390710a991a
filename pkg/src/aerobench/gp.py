"""Gaussian-process regression on the unit box.

Exact inference via Cholesky factorization: covariance kernels, posterior
moments, marginal-likelihood hyperparameter fitting with multi-start ascent,
and joint posterior sampling on finite candidate sets.  Inputs live in the
normalized design box [0, 1]^d; targets are arbitrary reals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist

from .errors import NumericalFailure

SQUARED_EXPONENTIAL = "squared-exponential"
MATERN52 = "matern52"
KERNEL_FAMILIES = (SQUARED_EXPONENTIAL, MATERN52)

# Log-space search box for hyperparameter fitting (standardized-target units).
LENGTHSCALE_BOUNDS = (1e-3, 10.0)
SIGNAL_VARIANCE_BOUNDS = (1e-4, 1e2)
NOISE_VARIANCE_BOUNDS = (1e-8, 1e-1)

# Escalation ladder applied when a covariance factorization fails.
JITTERS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

_SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class KernelSpec:
    """Stationary covariance function with per-dimension lengthscales."""

    family: str
    lengthscales: np.ndarray
    signal_variance: float

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if ls.ndim != 1 or not np.all(ls > 0):
            raise ValueError("lengthscales must be a 1-d array of positives")
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be positive")
        object.__setattr__(self, "lengthscales", ls)

    @property
    def dim(self) -> int:
        return self.lengthscales.size


@dataclass(frozen=True)
class Dataset:
    """Observation sites in [0,1]^d with targets and observation-noise variance.

    ``noise_variance=None`` marks the noise level as unknown; fitting then
    learns it alongside the kernel hyperparameters.
    """

    X: np.ndarray
    y: np.ndarray
    noise_variance: float | None = 0.0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if X.size == 0:
            X = X.reshape(0, max(1, X.shape[-1] if X.ndim == 2 else 1))
        if X.shape[0] != y.shape[0]:
            raise ValueError("X row count must equal y length")
        if X.size and (X.min() < -1e-9 or X.max() > 1 + 1e-9):
            raise ValueError("observation sites must lie inside [0,1]^d")
        if self.noise_variance is not None and self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class PosteriorMoments:
    mean: float
    variance: float


@dataclass(frozen=True)
class PosteriorSample:
    """One joint draw over a candidate set.

    ``independent_marginals`` flags the fallback taken when the joint
    covariance could not be factorized even with maximal jitter.
    """

    values: np.ndarray
    independent_marginals: bool = False


@dataclass(frozen=True)
class GpModel:
    """Immutable trained GP: kernel + data + cached Cholesky factor.

    ``y_shift``/``y_scale`` un-standardize posterior outputs; direct
    construction through :func:`build_gp` leaves them at identity so the
    model is the plain zero-mean posterior.
    """

    kernel: KernelSpec
    data: Dataset
    chol: np.ndarray | None
    alpha: np.ndarray | None
    jitter: float = 0.0
    y_shift: float = 0.0
    y_scale: float = 1.0

    @property
    def dim(self) -> int:
        return self.kernel.dim

    @property
    def n(self) -> int:
        return self.data.n


def kernel_eval(spec: KernelSpec, x: np.ndarray, x2: np.ndarray) -> float:
    """Evaluate k(x, x') for a single pair of points."""
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.size != spec.dim or x2.size != spec.dim:
        raise ValueError(
            f"point dimension {x.size}/{x2.size} does not match kernel dimension {spec.dim}"
        )
    return float(kernel_matrix(spec, x[None, :], x2[None, :])[0, 0])


def kernel_matrix(spec: KernelSpec, X: np.ndarray, X2: np.ndarray | None = None) -> np.ndarray:
    """Covariance matrix k(X, X2); X2=None means k(X, X) with exact diagonal."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xs = X / spec.lengthscales
    if X2 is None:
        X2s = Xs
    else:
        X2s = np.atleast_2d(np.asarray(X2, dtype=float)) / spec.lengthscales
    if spec.family == SQUARED_EXPONENTIAL:
        d2 = cdist(Xs, X2s, metric="sqeuclidean")
        K = spec.signal_variance * np.exp(-0.5 * d2)
    else:
        r = cdist(Xs, X2s, metric="euclidean")
        K = spec.signal_variance * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-_SQRT5 * r)
    if X2 is None:
        # guard against cdist round-off off the diagonal of k(X, X)
        np.fill_diagonal(K, spec.signal_variance)
        K = 0.5 * (K + K.T)
    return K


def _factor_covariance(K: np.ndarray, noise_variance: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of K + (noise + jitter) I, escalating jitter.

    Raises :class:`NumericalFailure` carrying the attempted jitter levels
    when even the largest jitter cannot rescue the factorization.
    """
    n = K.shape[0]
    eye = np.eye(n)
    attempted = []
    for jitter in (0.0,) + JITTERS:
        attempted.append(jitter)
        try:
            L = cholesky(K + (noise_variance + jitter) * eye, lower=True)
            return L, jitter
        except np.linalg.LinAlgError:
            continue
        except ValueError:
            continue
    raise NumericalFailure(
        f"covariance factorization failed for n={n} after jitter escalation",
        attempted_jitters=attempted,
    )


def build_gp(
    kernel: KernelSpec,
    data: Dataset,
    *,
    y_shift: float = 0.0,
    y_scale: float = 1.0,
) -> GpModel:
    """Construct a trained model (factorize once, reuse for every query)."""
    if data.n and data.dim != kernel.dim:
        raise ValueError("dataset dimension does not match kernel dimension")
    if data.n == 0:
        return GpModel(kernel, data, None, None, 0.0, y_shift, y_scale)
    noise = data.noise_variance if data.noise_variance is not None else 0.0
    K = kernel_matrix(kernel, data.X)
    L, jitter = _factor_covariance(K, noise)
    alpha = cho_solve((L, True), data.y)
    return GpModel(kernel, data, L, alpha, jitter, y_shift, y_scale)


def posterior(model: GpModel, x: np.ndarray) -> PosteriorMoments:
    """Posterior mean and variance at a single point."""
    mean, var = posterior_many(model, np.atleast_2d(np.asarray(x, dtype=float)))
    return PosteriorMoments(float(mean[0]), float(var[0]))


def posterior_many(model: GpModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized posterior moments at the rows of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.dim:
        raise ValueError(f"query dimension {X.shape[1]} does not match model dimension {model.dim}")
    prior_var = np.full(X.shape[0], model.kernel.signal_variance)
    if model.n == 0:
        shift, scale = model.y_shift, model.y_scale
        return np.full(X.shape[0], shift), prior_var * scale * scale
    k_star = kernel_matrix(model.kernel, model.data.X, X)
    mean = k_star.T @ model.alpha
    v = solve_triangular(model.chol, k_star, lower=True)
    var = prior_var - np.einsum("ij,ij->j", v, v)
    np.maximum(var, 0.0, out=var)
    shift, scale = model.y_shift, model.y_scale
    return shift + scale * mean, var * scale * scale


def posterior_covariance(model: GpModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint posterior mean vector and covariance matrix over the rows of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    K_cc = kernel_matrix(model.kernel, X)
    if model.n == 0:
        mean = np.zeros(X.shape[0])
    else:
        k_star = kernel_matrix(model.kernel, model.data.X, X)
        mean = k_star.T @ model.alpha
        v = solve_triangular(model.chol, k_star, lower=True)
        K_cc = K_cc - v.T @ v
    shift, scale = model.y_shift, model.y_scale
    return shift + scale * mean, K_cc * scale * scale


def sample_posterior(model: GpModel, candidates: np.ndarray, rng: np.random.Generator) -> PosteriorSample:
    """One joint posterior draw over the candidate rows.

    Falls back to independent marginal draws (flagged on the result) when
    the joint covariance cannot be factorized at any jitter level.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.shape[0] < 1:
        raise ValueError("need at least one candidate")
    mean, cov = posterior_covariance(model, candidates)
    z = rng.standard_normal(candidates.shape[0])
    try:
        L, _ = _factor_covariance(cov, 0.0)
        return PosteriorSample(mean + L @ z, independent_marginals=False)
    except NumericalFailure:
        sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
        return PosteriorSample(mean + sd * z, independent_marginals=True)


def log_marginal_likelihood(kernel: KernelSpec, data: Dataset, noise_variance: float) -> float:
    """Gaussian log evidence of the targets under the kernel + noise model."""
    K = kernel_matrix(kernel, data.X)
    L, jitter = _factor_covariance(K, noise_variance)
    alpha = cho_solve((L, True), data.y)
    return float(
        -0.5 * data.y @ alpha
        - np.sum(np.log(np.diag(L)))
        - 0.5 * data.n * math.log(2.0 * math.pi)
    )


@dataclass(frozen=True)
class FitResult:
    """Fitted hyperparameters plus the search diagnostics used by tests."""

    kernel: KernelSpec
    noise_variance: float
    log_marginal_likelihood: float
    starts: tuple = field(default=(), repr=False)


def _neg_lml_and_grad(theta, family, X, y, d, learn_noise, fixed_noise):
    """Negative log marginal likelihood and gradient in log-parameter space.

    theta = [log ell_1..d, log sigma_f^2, (log tau^2)].
    """
    ls = np.exp(theta[:d])
    sig2 = math.exp(theta[d])
    tau2 = math.exp(theta[d + 1]) if learn_noise else fixed_noise
    n = X.shape[0]
    Xs = X / ls
    diff = Xs[:, None, :] - Xs[None, :, :]
    if family == SQUARED_EXPONENTIAL:
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        Kk = sig2 * np.exp(-0.5 * d2)
    else:
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        r = np.sqrt(np.maximum(d2, 0.0))
        Kk = sig2 * (1.0 + _SQRT5 * r + (5.0 / 3.0) * d2) * np.exp(-_SQRT5 * r)
    K = Kk + tau2 * np.eye(n)
    try:
        L, jitter = _factor_covariance(K - tau2 * np.eye(n), tau2)
    except NumericalFailure:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2.0 * math.pi)
    Kinv = cho_solve((L, True), np.eye(n))
    A = np.outer(alpha, alpha) - Kinv

    grad = np.zeros_like(theta)
    if family == SQUARED_EXPONENTIAL:
        for j in range(d):
            dK = Kk * diff[:, :, j] ** 2
            grad[j] = 0.5 * np.einsum("ij,ji->", A, dK)
    else:
        base = sig2 * (5.0 / 3.0) * (1.0 + _SQRT5 * r) * np.exp(-_SQRT5 * r)
        for j in range(d):
            dK = base * diff[:, :, j] ** 2
            grad[j] = 0.5 * np.einsum("ij,ji->", A, dK)
    grad[d] = 0.5 * np.einsum("ij,ji->", A, Kk)
    if learn_noise:
        grad[d + 1] = 0.5 * tau2 * np.trace(A)
    return -lml, -grad


def fit_hyperparameters(
    data: Dataset,
    kernel_family: str = MATERN52,
    *,
    n_restarts: int = 8,
    seed: int = 0,
    warm_starts: tuple[tuple[KernelSpec, float], ...] = (),
) -> FitResult:
    """Maximize the log marginal likelihood over a bounded log-space box.

    Targets are centered/scaled internally for search stability; the fitted
    signal and noise variances are mapped back to the units of ``data.y``.
    Deterministic for a given dataset, seed, and restart count.

    Parameters
    ----------
    data : Dataset
        Needs n >= 2.  ``noise_variance=None`` makes the noise a learned
        hyperparameter inside :data:`NOISE_VARIANCE_BOUNDS`.
    kernel_family : str
        One of :data:`KERNEL_FAMILIES`.
    n_restarts : int
        Multi-start count; the first start is a fixed heuristic center, the
        rest are drawn log-uniform from a generator seeded with ``seed``.
    warm_starts : tuple
        Extra (KernelSpec, noise_variance) pairs appended to the start list,
        e.g. the previous fit during an optimization loop.
    """
    if data.n < 2:
        raise ValueError("hyperparameter fitting needs at least 2 observations")
    if kernel_family not in KERNEL_FAMILIES:
        raise ValueError(f"unknown kernel family {kernel_family!r}")
    d = data.dim
    learn_noise = data.noise_variance is None

    y_sd = float(np.std(data.y))
    scale = y_sd if y_sd > 1e-12 else 1.0
    y_std = (data.y - float(np.mean(data.y))) / scale
    fixed_noise = 0.0 if learn_noise else data.noise_variance / scale**2

    lo = np.log(np.r_[np.full(d, LENGTHSCALE_BOUNDS[0]), SIGNAL_VARIANCE_BOUNDS[0]])
    hi = np.log(np.r_[np.full(d, LENGTHSCALE_BOUNDS[1]), SIGNAL_VARIANCE_BOUNDS[1]])
    if learn_noise:
        lo = np.r_[lo, math.log(NOISE_VARIANCE_BOUNDS[0])]
        hi = np.r_[hi, math.log(NOISE_VARIANCE_BOUNDS[1])]

    rng = np.random.default_rng(seed)
    starts = [np.clip(np.log(np.r_[np.full(d, 0.5), 1.0, [1e-4] * learn_noise]), lo, hi)]
    for _ in range(max(0, n_restarts - 1)):
        starts.append(lo + (hi - lo) * rng.uniform(size=lo.size))
    for spec, noise in warm_starts:
        theta = np.log(np.r_[spec.lengthscales, spec.signal_variance / scale**2])
        if learn_noise:
            theta = np.r_[theta, math.log(max(noise / scale**2, NOISE_VARIANCE_BOUNDS[0]))]
        starts.append(np.clip(theta, lo, hi))

    args = (kernel_family, data.X, y_std, d, learn_noise, fixed_noise)
    best_theta, best_val = None, np.inf
    start_records = []
    for theta0 in starts:
        f0, _ = _neg_lml_and_grad(theta0, *args)
        start_records.append((theta0, f0))
        res = optimize.minimize(
            _neg_lml_and_grad,
            theta0,
            args=args,
            jac=True,
            method="L-BFGS-B",
            bounds=list(zip(lo, hi)),
        )
        for theta, val in ((res.x, res.fun), (theta0, f0)):
            if val < best_val:
                best_theta, best_val = theta, val
    if best_theta is None or not np.isfinite(best_val):
        raise NumericalFailure("every hyperparameter restart failed factorization")

    def _to_raw(theta):
        kern = KernelSpec(kernel_family, np.exp(theta[:d]), math.exp(theta[d]) * scale**2)
        if learn_noise:
            noise = math.exp(theta[d + 1]) * scale**2
        else:
            noise = float(data.noise_variance)
        return kern, noise

    kernel, noise = _to_raw(best_theta)
    lml = log_marginal_likelihood(kernel, Dataset(data.X, data.y - np.mean(data.y), noise), noise)
    return FitResult(kernel, noise, lml, starts=tuple(_to_raw(t) for t, _ in start_records))


def fit_gp(
    X: np.ndarray,
    y: np.ndarray,
    *,
    kernel_family: str = MATERN52,
    noise_variance: float | None = None,
    n_restarts: int = 8,
    seed: int = 0,
    warm_starts: tuple[tuple[KernelSpec, float], ...] = (),
) -> GpModel:
    """Fit hyperparameters and build a model in one step.

    Targets are standardized internally; the returned model un-scales its
    posterior outputs, so callers work in original target units throughout.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    shift = float(np.mean(y)) if y.size else 0.0
    sd = float(np.std(y)) if y.size else 1.0
    scale = sd if sd > 1e-12 else 1.0
    y_std = (y - shift) / scale
    noise_std = None if noise_variance is None else noise_variance / scale**2
    data = Dataset(X, y_std, noise_std)
    warm_std = tuple(
        (KernelSpec(s.family, s.lengthscales, s.signal_variance / scale**2), nv / scale**2)
        for s, nv in warm_starts
    )
    fit = fit_hyperparameters(
        data, kernel_family, n_restarts=n_restarts, seed=seed, warm_starts=warm_std
    )
    trained = Dataset(X, y_std, fit.noise_variance)
    return build_gp(fit.kernel, trained, y_shift=shift, y_scale=scale)
