"""Exact single-output Gaussian-process regression.

The kernel is a scaled squared-exponential with one lengthscale per input
dimension (ARD). Targets are standardised before fitting and every prediction
is mapped back to the original scale. Hyperparameters are fitted by maximising
the log marginal likelihood in log space with analytic gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import minimize

from ._qmc import sobol

LENGTHSCALE_BOUNDS = (1e-3, 1e3)
OUTPUT_SCALE_BOUNDS = (1e-6, 1e3)
NOISE_BOUNDS = (1e-8, 1e1)

JITTER_START = 1e-8
JITTER_MAX = 1e-4
STD_FLOOR = 1e-12

N_STARTS = 8
MAX_ITER = 200

# box (log space) that the Sobol restarts of the likelihood search are drawn from
_START_BOX = {
    "lengthscale": (0.05, 2.0),
    "output_scale": (0.1, 10.0),
    "noise": (1e-6, 1e-1),
}

_LOG_2PI = math.log(2.0 * math.pi)


class GpFitError(RuntimeError):
    """Raised when a Gram matrix cannot be factorised even after jitter escalation."""


@dataclass(frozen=True)
class GpHyperparams:
    lengthscales: np.ndarray
    output_scale: float
    noise_variance: float

    @classmethod
    def default(cls, d: int) -> "GpHyperparams":
        return cls(np.full(d, 0.5), 1.0, 1e-4)

    @classmethod
    def from_log(cls, theta: np.ndarray) -> "GpHyperparams":
        theta = np.asarray(theta, dtype=float)
        return cls(np.exp(theta[:-2]), float(np.exp(theta[-2])), float(np.exp(theta[-1])))

    def to_log(self) -> np.ndarray:
        return np.concatenate(
            [np.log(self.lengthscales), [math.log(self.output_scale), math.log(self.noise_variance)]]
        )

    @property
    def dim(self) -> int:
        return len(self.lengthscales)


def log_bounds(d: int) -> list[tuple[float, float]]:
    """Box constraints for the log-hyperparameter vector."""
    ls = (math.log(LENGTHSCALE_BOUNDS[0]), math.log(LENGTHSCALE_BOUNDS[1]))
    os_ = (math.log(OUTPUT_SCALE_BOUNDS[0]), math.log(OUTPUT_SCALE_BOUNDS[1]))
    nz = (math.log(NOISE_BOUNDS[0]), math.log(NOISE_BOUNDS[1]))
    return [ls] * d + [os_, nz]


def kernel(x, x_prime, hyperparams: GpHyperparams) -> float:
    """Scaled RBF-ARD covariance between two points."""
    x = np.asarray(x, dtype=float)
    x_prime = np.asarray(x_prime, dtype=float)
    r = (x - x_prime) / hyperparams.lengthscales
    return hyperparams.output_scale * math.exp(-0.5 * float(np.dot(r, r)))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    np.maximum(d2, 0.0, out=d2)
    return d2


def kernel_matrix(a: np.ndarray, b: np.ndarray, hyperparams: GpHyperparams) -> np.ndarray:
    """Cross-covariance matrix between the rows of ``a`` and ``b``."""
    ls = hyperparams.lengthscales
    return hyperparams.output_scale * np.exp(-0.5 * _sqdist(a / ls, b / ls))


def _cholesky_with_jitter(k: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``k + jitter*scale*I`` escalating the jitter on failure."""
    jitter = JITTER_START
    n = k.shape[0]
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            chol = linalg.cholesky(k + jitter * scale * np.eye(n), lower=True, check_finite=False)
            return chol, jitter
        except linalg.LinAlgError:
            jitter *= 10.0
    raise GpFitError("matrix is not positive definite after jitter escalation")


def standardise(y: np.ndarray) -> tuple[np.ndarray, float, float]:
    mean = float(np.mean(y))
    std = max(float(np.std(y)), STD_FLOOR)
    return (y - mean) / std, mean, std


def destandardise(z, mean: float, std: float):
    return np.asarray(z) * std + mean


def _per_dim_sqdiff(x: np.ndarray) -> np.ndarray:
    """Squared coordinate differences, shape (d, n, n)."""
    diff = x.T[:, :, None] - x.T[:, None, :]
    return diff * diff


def _lml_terms(theta: np.ndarray, y: np.ndarray, sqdiff: np.ndarray, with_grad: bool = True):
    d = sqdiff.shape[0]
    n = y.shape[0]
    ls2 = np.exp(2.0 * theta[:d])
    s = math.exp(theta[d])
    noise = math.exp(theta[d + 1])

    corr = np.exp(-0.5 * np.tensordot(1.0 / ls2, sqdiff, axes=1))
    k_f = s * corr
    chol, jitter = _cholesky_with_jitter(k_f + noise * np.eye(n), s)
    alpha = linalg.cho_solve((chol, True), y, check_finite=False)
    lml = -0.5 * float(y @ alpha) - float(np.log(np.diag(chol)).sum()) - 0.5 * n * _LOG_2PI
    if not with_grad:
        return lml, None
    k_inv, info = linalg.lapack.dpotri(chol, lower=1)
    if info != 0:
        raise GpFitError("dpotri failed")
    k_inv = np.tril(k_inv) + np.tril(k_inv, -1).T
    w = np.outer(alpha, alpha) - k_inv
    a = w * k_f
    grad = np.empty(d + 2)
    grad[:d] = 0.5 * np.tensordot(sqdiff, a, axes=([1, 2], [0, 1])) / ls2
    trace_w = float(np.trace(w))
    # jitter is proportional to the output scale, so it follows log(s)
    grad[d] = 0.5 * (float(a.sum()) + jitter * s * trace_w)
    grad[d + 1] = 0.5 * noise * trace_w
    return lml, grad


def log_marginal_likelihood(model: "GpModel", theta=None) -> float:
    """Log marginal likelihood of the model's standardised targets at ``theta``."""
    theta = model.hyperparams.to_log() if theta is None else np.asarray(theta, dtype=float)
    lml, _ = _lml_terms(theta, model.train_y_std, _per_dim_sqdiff(model.train_x), with_grad=False)
    return lml


def log_marginal_likelihood_grad(model: "GpModel", theta=None) -> np.ndarray:
    """Analytic gradient of the log marginal likelihood w.r.t. the log-hyperparameters.

    The ordering is ``[log lengthscales..., log output_scale, log noise_variance]``.
    """
    theta = model.hyperparams.to_log() if theta is None else np.asarray(theta, dtype=float)
    _, grad = _lml_terms(theta, model.train_y_std, _per_dim_sqdiff(model.train_x))
    return grad


@dataclass
class GpModel:
    """A conditioned GP. Treat as immutable once built."""

    train_x: np.ndarray
    train_y_raw: np.ndarray
    y_mean: float
    y_std: float
    hyperparams: GpHyperparams
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    _scaled_x: np.ndarray = field(repr=False)
    _scaled_sq: np.ndarray = field(repr=False)
    _chol_inv: np.ndarray = field(repr=False)

    @property
    def train_y_std(self) -> np.ndarray:
        return (self.train_y_raw - self.y_mean) / self.y_std

    @property
    def n(self) -> int:
        return self.train_x.shape[0]

    @property
    def dim(self) -> int:
        return self.train_x.shape[1]

    def cross_cov(self, query_x: np.ndarray) -> np.ndarray:
        q = np.asarray(query_x, dtype=float) / self.hyperparams.lengthscales
        d2 = (q * q).sum(1)[:, None] + self._scaled_sq[None, :] - 2.0 * q @ self._scaled_x.T
        np.maximum(d2, 0.0, out=d2)
        return self.hyperparams.output_scale * np.exp(-0.5 * d2)

    def posterior_standardised(self, query_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Latent posterior mean and variance on the standardised target scale."""
        k_star = self.cross_cov(np.atleast_2d(query_x))
        mean = k_star @ self.alpha
        v = k_star @ self._chol_inv.T
        var = self.hyperparams.output_scale - np.einsum("ij,ij->i", v, v)
        np.maximum(var, 0.0, out=var)
        return mean, var

    def posterior(self, query_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean, var = self.posterior_standardised(query_x)
        return mean * self.y_std + self.y_mean, var * self.y_std**2

    def posterior_cov(self, query_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Latent posterior mean and full covariance, original scale."""
        query_x = np.atleast_2d(np.asarray(query_x, dtype=float))
        k_star = self.cross_cov(query_x)
        mean = k_star @ self.alpha
        v = k_star @ self._chol_inv.T
        cov = kernel_matrix(query_x, query_x, self.hyperparams) - v @ v.T
        return mean * self.y_std + self.y_mean, cov * self.y_std**2

    def sample_posterior(self, query_x: np.ndarray, s: int, rng: np.random.Generator) -> np.ndarray:
        return sample_posterior(self, query_x, s, rng)

    def log_marginal_likelihood(self) -> float:
        return log_marginal_likelihood(self)


def condition(train_x, train_y, hyperparams: GpHyperparams) -> GpModel:
    """Build a GP conditioned on data at fixed hyperparameters."""
    train_x = np.atleast_2d(np.asarray(train_x, dtype=float))
    train_y = np.asarray(train_y, dtype=float).ravel()
    if train_x.shape[0] != train_y.shape[0]:
        raise ValueError("train_x and train_y have different numbers of rows")
    if not np.all(np.isfinite(train_y)) or not np.all(np.isfinite(train_x)):
        raise ValueError("training data must be finite")
    y_std_vals, mean, std = standardise(train_y)
    n = train_x.shape[0]
    k_f = kernel_matrix(train_x, train_x, hyperparams)
    chol, jitter = _cholesky_with_jitter(
        k_f + hyperparams.noise_variance * np.eye(n), hyperparams.output_scale
    )
    alpha = linalg.cho_solve((chol, True), y_std_vals, check_finite=False)
    chol_inv = linalg.solve_triangular(chol, np.eye(n), lower=True, check_finite=False)
    scaled = train_x / hyperparams.lengthscales
    return GpModel(
        train_x=train_x,
        train_y_raw=train_y,
        y_mean=mean,
        y_std=std,
        hyperparams=hyperparams,
        chol=chol,
        alpha=alpha,
        jitter=jitter,
        _scaled_x=scaled,
        _scaled_sq=(scaled * scaled).sum(1),
        _chol_inv=chol_inv,
    )


def _start_points(d: int, n_starts: int, seed: int) -> np.ndarray:
    default = GpHyperparams.default(d).to_log()
    if n_starts <= 1:
        return default[None, :]
    lo = np.log([_START_BOX["lengthscale"][0]] * d + [_START_BOX["output_scale"][0], _START_BOX["noise"][0]])
    hi = np.log([_START_BOX["lengthscale"][1]] * d + [_START_BOX["output_scale"][1], _START_BOX["noise"][1]])
    u = sobol(n_starts - 1, d + 2, seed=seed)
    return np.vstack([default, lo + u * (hi - lo)])


def fit(
    train_x,
    train_y,
    n_starts: int = N_STARTS,
    max_iter: int = MAX_ITER,
    seed: int = 0,
) -> GpModel:
    """Fit hyperparameters by multi-start L-BFGS-B on the log marginal likelihood.

    One start is the default hyperparameter vector, the rest come from a fixed
    Sobol design in a log-space box, so fitting is deterministic. With a
    single training point the hyperparameters are not optimised.
    """
    train_x = np.atleast_2d(np.asarray(train_x, dtype=float))
    train_y = np.asarray(train_y, dtype=float).ravel()
    if train_x.shape[0] == 0:
        raise ValueError("cannot fit a GP without data")
    if not np.all(np.isfinite(train_y)):
        raise ValueError("non-finite training targets")
    # canonical row order makes the fit exactly independent of data ordering
    order = np.lexsort(np.column_stack([train_x, train_y]).T[::-1])
    train_x, train_y = train_x[order], train_y[order]
    n, d = train_x.shape
    if n == 1:
        return condition(train_x, train_y, GpHyperparams(np.full(d, 0.5), 1.0, 1e-6))

    y, _, _ = standardise(train_y)
    sqdiff = _per_dim_sqdiff(train_x)
    bounds = log_bounds(d)

    def objective(theta):
        try:
            lml, grad = _lml_terms(theta, y, sqdiff)
        except GpFitError:
            return 1e25, np.zeros_like(theta)
        return -lml, -grad

    best_theta, best_val = None, np.inf
    for theta0 in _start_points(d, n_starts, seed):
        val0, _ = objective(theta0)
        if val0 < best_val:
            best_theta, best_val = theta0, val0
        res = minimize(
            objective,
            theta0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-9},
        )
        if np.isfinite(res.fun) and res.fun < best_val:
            best_theta, best_val = res.x, res.fun
    return condition(train_x, train_y, GpHyperparams.from_log(best_theta))


def posterior(model: GpModel, query_x) -> tuple[np.ndarray, np.ndarray]:
    """Latent predictive mean and variance at ``query_x``, original scale."""
    return model.posterior(query_x)


def sample_posterior(model: GpModel, query_x, s: int, rng: np.random.Generator) -> np.ndarray:
    """Joint posterior draws, shape (s, m)."""
    if s < 1:
        raise ValueError("need at least one sample")
    query_x = np.atleast_2d(np.asarray(query_x, dtype=float))
    m = query_x.shape[0]
    if m == 1:
        mean, var = model.posterior(query_x)
        return mean[0] + math.sqrt(var[0]) * rng.standard_normal((s, 1))
    mean, cov = model.posterior_cov(query_x)
    cov = 0.5 * (cov + cov.T)
    scale = model.hyperparams.output_scale * model.y_std**2
    try:
        chol, _ = _cholesky_with_jitter(cov, scale)
    except GpFitError as exc:
        raise GpFitError("posterior covariance is not PSD") from exc
    return mean[None, :] + rng.standard_normal((s, m)) @ chol.T
