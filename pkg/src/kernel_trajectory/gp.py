"""Exact Gaussian process regression with Cholesky factorizations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .grammar import HyperParams, gram_batch, gram_with_grads

__all__ = [
    "Dataset",
    "Predictive",
    "CholeskyError",
    "jittered_cholesky",
    "log_marginal_likelihood",
    "log_marginal_likelihood_batch",
    "lml_and_grad",
    "posterior_predict",
    "sample_prior",
    "log_predictive_density",
]

LOG_2PI = np.log(2.0 * np.pi)
JITTER_LADDER = (0.0,) + tuple(10.0 ** k for k in range(-8, -1))


class CholeskyError(np.linalg.LinAlgError):
    """Factorization failed even with the largest jitter."""

    def __init__(self, message, jitter):
        super().__init__(message)
        self.jitter = jitter


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"X has shape {X.shape} but y has {y.shape[0]} entries")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(np.vstack([p.X for p in parts]), np.concatenate([p.y for p in parts]))

    def __eq__(self, other):
        return (isinstance(other, Dataset) and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y))

    def __hash__(self):
        return hash((self.X.tobytes(), self.y.tobytes()))


@dataclass(frozen=True)
class Predictive:
    mean: np.ndarray
    variance: np.ndarray
    covariance: Optional[np.ndarray] = None


def jittered_cholesky(K):
    """Lower Cholesky factor of ``K``, adding diagonal jitter on failure.

    Jitter is relative to the mean diagonal and grows by 10x from 1e-8 up to
    1e-2 before giving up.
    """
    scale = float(np.mean(np.diag(K))) if K.size else 1.0
    if not np.isfinite(scale):
        raise CholeskyError("non-finite Gram matrix", 0.0)
    if scale <= 0.0:
        scale = 1.0
    for rel in JITTER_LADDER:
        jitter = rel * scale
        try:
            return np.linalg.cholesky(K + jitter * np.eye(len(K)) if jitter else K)
        except np.linalg.LinAlgError:
            continue
    raise CholeskyError(f"Cholesky failed with jitter up to {jitter:g}", jitter)


def log_marginal_likelihood_batch(data: Dataset, comp, values):
    """Log marginal likelihood for each row of ``values``.

    Rows whose factorization fails come back as ``-inf``.
    """
    values = np.atleast_2d(values)
    K = gram_batch(comp, values, data.X, add_noise=True)
    out = np.empty(len(values))
    for s in range(len(values)):
        try:
            out[s] = _lml_from_chol(_fast_cholesky(K[s]), data.y)
        except CholeskyError:
            out[s] = -np.inf
    return out


def _fast_cholesky(K):
    try:
        return cholesky(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return jittered_cholesky(K)


def _lml_from_chol(L, y):
    alpha = solve_triangular(L, y, lower=True, check_finite=False)
    return -0.5 * (alpha @ alpha + 2.0 * np.log(np.diag(L)).sum() + len(y) * LOG_2PI)


def lml_and_grad(data: Dataset, comp, values):
    """Log marginal likelihood and its gradient in the constrained parameters."""
    K, dK = gram_with_grads(comp, values, data.X)
    L = _fast_cholesky(K)
    alpha = cho_solve((L, True), data.y, check_finite=False)
    lml = -0.5 * (data.y @ alpha + 2.0 * np.log(np.diag(L)).sum() + data.n * LOG_2PI)
    W = cho_solve((L, True), np.eye(data.n), check_finite=False) - np.outer(alpha, alpha)
    grad = np.array([-0.5 * np.sum(W * d) for d in dK])
    return float(lml), grad


def log_marginal_likelihood(data: Dataset, comp, theta: HyperParams) -> float:
    """``-1/2 (y^T K^-1 y + log|K| + n log 2 pi)`` with ``K = Gram + noise I``."""
    if data.n < 1:
        raise ValueError("log marginal likelihood needs at least one observation")
    values = theta.values if isinstance(theta, HyperParams) else theta
    K = gram_batch(comp, values, data.X, add_noise=True)[0]
    return float(_lml_from_chol(_fast_cholesky(K), data.y))


def posterior_predict(train: Dataset, Xstar, comp, theta, full_cov=False) -> Predictive:
    """Predictive distribution of noisy targets at ``Xstar``."""
    values = theta.values if isinstance(theta, HyperParams) else np.asarray(theta)
    noise = float(values[-1])
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    Kss = gram_batch(comp, values, Xstar)[0]
    if train.n == 0:
        cov = Kss + noise * np.eye(len(Xstar))
        return Predictive(np.zeros(len(Xstar)), np.diag(cov).copy(), cov if full_cov else None)
    L = jittered_cholesky(gram_batch(comp, values, train.X, add_noise=True)[0])
    Ks = gram_batch(comp, values, train.X, Xstar)[0]
    mean = Ks.T @ cho_solve((L, True), train.y)
    V = solve_triangular(L, Ks, lower=True)
    if full_cov:
        cov = Kss - V.T @ V + noise * np.eye(len(Xstar))
        var = np.diag(cov).copy()
    else:
        cov = None
        var = np.diag(Kss) - (V ** 2).sum(axis=0) + noise
    return Predictive(mean, np.maximum(var, 0.0), cov)


def sample_prior(comp, theta, X, rng, return_latent=False):
    """Noisy draw ``L z + sigma eps`` from the GP prior at ``X``.

    With ``return_latent`` the noise-free function values ``L z`` are
    returned as well.
    """
    values = theta.values if isinstance(theta, HyperParams) else np.asarray(theta)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) < 1:
        raise ValueError("need at least one input")
    L = jittered_cholesky(gram_batch(comp, values, X)[0])
    z = rng.standard_normal(len(X))
    eps = rng.standard_normal(len(X))
    f = L @ z
    y = f + np.sqrt(values[-1]) * eps
    return (y, f) if return_latent else y


def log_predictive_density(pred: Predictive, y) -> np.ndarray:
    """Pointwise Gaussian log density of ``y`` under marginal predictives."""
    y = np.asarray(y, dtype=float)
    var = np.maximum(pred.variance, 1e-300)
    return -0.5 * (LOG_2PI + np.log(var) + (y - pred.mean) ** 2 / var)
