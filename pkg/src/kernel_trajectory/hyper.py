"""Hyperparameter priors, MAP fits and Monte-Carlo kernel evidence."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .gp import Dataset, log_marginal_likelihood, log_marginal_likelihood_batch, lml_and_grad
from .grammar import POSITIVE_ROLES, Composition, HyperParams, param_layout, render

__all__ = [
    "ROLES",
    "PRESETS",
    "HyperPrior",
    "HyperDist",
    "FitFailure",
    "prior_sample",
    "prior_log_density",
    "map_fit",
    "logmeanexp",
    "evidence",
    "empirical_update",
    "bic",
    "lookup",
    "fit_seed",
]

ROLES = ("lengthscale", "amplitude", "period", "location", "noise")

PRESETS = {
    "toy": {
        "lengthscale": ("lognormal", 0.0, 0.5),
        "amplitude": ("lognormal", 1.0, 0.5),
        "period": ("lognormal", 1.0, 0.5),
        "location": ("normal", 0.0, 0.1),
        "noise": ("lognormal", 0.0, 0.5),
    },
    "heartsteps": {
        "lengthscale": ("lognormal", -1.0, 0.75),
        "amplitude": ("lognormal", 0.5, 0.75),
        "period": ("lognormal", -1.0, 0.75),
        "location": ("normal", 0.0, 0.1),
        "noise": ("lognormal", 1.0, 0.75),
    },
}

# keep exp() of unconstrained coordinates finite
_LOG_BOUND = 30.0


class FitFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class HyperPrior:
    """Independent prior per parameter role.

    Each role maps to ``(family, mu, var)``; for ``lognormal`` the pair is
    the mean and variance of the underlying normal.
    """

    roles: dict = field(default_factory=lambda: dict(PRESETS["toy"]))
    name: str = "custom"

    def __post_init__(self):
        missing = set(ROLES) - set(self.roles)
        if missing:
            raise ValueError(f"prior is missing roles {sorted(missing)}")
        for role, (family, mu, var) in self.roles.items():
            if family not in ("lognormal", "normal"):
                raise ValueError(f"unknown prior family {family!r}")
            if role in POSITIVE_ROLES and family != "lognormal":
                raise ValueError(f"{role} needs a positive-support prior")
            if var <= 0:
                raise ValueError("prior variance must be positive")

    @classmethod
    def preset(cls, name):
        try:
            return cls(dict(PRESETS[name]), name=name)
        except KeyError:
            raise ValueError(f"unknown prior preset {name!r}") from None

    @classmethod
    def from_rows(cls, rows, base="toy"):
        """Override preset roles with ``(role, family, mu, var)`` rows."""
        roles = dict(PRESETS[base])
        for role, family, mu, var in rows:
            roles[role] = (family, float(mu), float(var))
        return cls(roles)

    def _table(self, comp):
        spec = [self.roles[role] for role, _, _ in param_layout(comp)]
        logn = np.array([f == "lognormal" for f, _, _ in spec])
        mu = np.array([m for _, m, _ in spec], dtype=float)
        sd = np.sqrt([v for _, _, v in spec])
        return logn, mu, sd

    def center(self, comp):
        """Prior median in the constrained space."""
        logn, mu, _ = self._table(comp)
        return np.where(logn, np.exp(mu), mu)

    def sample_values(self, comp, size, rng):
        logn, mu, sd = self._table(comp)
        z = mu + sd * rng.standard_normal((size, len(mu)))
        return np.where(logn, np.exp(z), z)

    def log_density_values(self, comp, values):
        logn, mu, sd = self._table(comp)
        values = np.atleast_2d(np.asarray(values, dtype=float))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(logn, np.log(np.where(values > 0, values, 1.0)), values)
            dens = -0.5 * ((z - mu) / sd) ** 2 - np.log(sd) - 0.5 * math.log(2 * math.pi)
            dens = dens - np.where(logn, z, 0.0)
        dens = np.where(logn & (values <= 0), -np.inf, dens)
        return dens.sum(axis=1)

    def to_unconstrained(self, comp, values):
        logn, _, _ = self._table(comp)
        values = np.asarray(values, dtype=float)
        out = values.copy()
        out[logn] = np.log(values[logn])
        return out

    def from_unconstrained(self, comp, u):
        logn, _, _ = self._table(comp)
        return np.where(logn, np.exp(np.clip(u, -_LOG_BOUND, _LOG_BOUND)), u)


def prior_sample(comp, prior: HyperPrior, rng) -> HyperParams:
    return HyperParams(comp, prior.sample_values(comp, 1, rng)[0])


def prior_log_density(comp, theta, prior: HyperPrior) -> float:
    values = theta.values if isinstance(theta, HyperParams) else theta
    return float(prior.log_density_values(comp, values)[0])


def _penalized(data, comp, prior, values):
    lml = log_marginal_likelihood_batch(data, comp, values[None])[0]
    return lml + prior.log_density_values(comp, values)[0]


def _penalized_and_grad(data, comp, prior, u):
    """Objective and its gradient in unconstrained coordinates."""
    logn, mu, sd = prior._table(comp)
    values = prior.from_unconstrained(comp, u)
    lml, grad = lml_and_grad(data, comp, values)
    logp = prior.log_density_values(comp, values)[0]
    grad = np.where(logn, grad * values, grad)
    grad = grad + np.where(logn, -1.0 - (u - mu) / sd ** 2, -(u - mu) / sd ** 2)
    return lml + logp, grad


def map_fit(data: Dataset, comp, prior: HyperPrior, restarts=3, rng=None, maxfev=500,
            method="L-BFGS-B", screen=32):
    """Maximize log marginal likelihood plus log prior density.

    The first restart starts at the prior median, the rest at the best
    of ``max(screen, restarts - 1)`` prior draws ranked by the objective.
    Screening matters for periodic factors, whose likelihood is multimodal
    in the period.
    Search runs in log space for positive parameters, with analytic
    gradients (``L-BFGS-B``) or derivative-free (``Nelder-Mead``).
    Returns ``(theta, objective)``.
    """
    if data.n < 1:
        raise ValueError("MAP fit needs at least one observation")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = np.random.default_rng(rng)
    starts = [prior.center(comp)]
    if restarts > 1:
        draws = prior.sample_values(comp, max(screen, restarts - 1), rng)
        with np.errstate(invalid="ignore"):
            score = (log_marginal_likelihood_batch(data, comp, draws)
                     + prior.log_density_values(comp, draws))
        score = np.where(np.isfinite(score), score, -np.inf)
        order = np.argsort(-score, kind="stable")[:restarts - 1]
        starts.extend(draws[np.sort(order)])
    logn, _, _ = prior._table(comp)
    bounds = [(-_LOG_BOUND, _LOG_BOUND) if pos else (None, None) for pos in logn]

    def negobj(u):
        val = _penalized(data, comp, prior, prior.from_unconstrained(comp, u))
        return -val if np.isfinite(val) else np.inf

    def negobj_grad(u):
        try:
            val, grad = _penalized_and_grad(data, comp, prior, u)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(u)
        if not (np.isfinite(val) and np.isfinite(grad).all()):
            return np.inf, np.zeros_like(u)
        return -val, -grad

    best_u, best_f = None, np.inf
    for x0 in starts:
        u0 = prior.to_unconstrained(comp, x0)
        f0 = negobj(u0)
        if method == "Nelder-Mead":
            res = minimize(negobj, u0, method="Nelder-Mead",
                           options={"maxfev": maxfev, "adaptive": True,
                                    "xatol": 1e-6, "fatol": 1e-8})
        else:
            res = minimize(negobj_grad, u0, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxfun": maxfev})
        f = negobj(res.x)
        u, f = (res.x, f) if f <= f0 else (u0, f0)
        if f < best_f:
            best_u, best_f = u, f
    if best_u is None or not np.isfinite(best_f):
        raise FitFailure(f"every MAP restart failed for {render(comp)!r}")
    return HyperParams(comp, prior.from_unconstrained(comp, best_u)), float(-best_f)


def logmeanexp(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(logsumexp(x) - math.log(len(x)))


@dataclass(frozen=True, eq=False)
class HyperDist:
    """Weighted point masses over hyperparameters; the prior when empty."""

    composition: Composition
    atoms: tuple = ()
    weights: tuple = ()
    fallback: HyperPrior = field(default_factory=HyperPrior)

    def __post_init__(self):
        atoms = tuple(self.atoms)
        if atoms and not self.weights:
            weights = (1.0 / len(atoms),) * len(atoms)
        else:
            weights = tuple(float(w) for w in self.weights)
        if len(weights) != len(atoms):
            raise ValueError("one weight per atom")
        if atoms:
            if min(weights) < 0 or not math.isclose(sum(weights), 1.0, rel_tol=1e-9):
                raise ValueError("atom weights must be non-negative and sum to 1")
            for a in atoms:
                if a.composition != self.composition:
                    raise ValueError("atom belongs to a different composition")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @property
    def is_empirical(self) -> bool:
        return bool(self.atoms)

    def sample_indices(self, size, rng):
        return rng.choice(len(self.atoms), size=size, p=np.asarray(self.weights))

    def sample_values(self, size, rng):
        if not self.atoms:
            return self.fallback.sample_values(self.composition, size, rng)
        table = np.stack([a.values for a in self.atoms])
        return table[self.sample_indices(size, rng)]


def evidence(data: Dataset, comp, dist: HyperDist, S=10, rng=None) -> float:
    """Log of the Monte-Carlo average of marginal likelihoods over ``S`` draws."""
    if S < 1:
        raise ValueError("S must be >= 1")
    rng = np.random.default_rng(rng)
    lml = log_marginal_likelihood_batch(data, comp, dist.sample_values(S, rng))
    if not np.isfinite(lml).any():
        raise FitFailure(f"all evidence samples failed for {render(comp)!r}")
    return logmeanexp(lml)


def fit_seed(root, data: Dataset, comp) -> list:
    """Seed material for one (dataset, composition) fit, independent of call order."""
    return [int(root), zlib.crc32(render(comp).encode()),
            zlib.crc32(data.X.tobytes() + data.y.tobytes())]


def empirical_update(assignments, prior: HyperPrior, restarts=3, rng=None, cache=None,
                     maxfev=500) -> dict:
    """Uniform point masses at each assignment's MAP hyperparameters.

    ``assignments`` is an iterable of ``(dataset, composition)``.  Returns a
    mapping from composition to :class:`HyperDist`; compositions without
    assignments are absent and fall back to the prior through :func:`lookup`.
    ``cache`` memoizes fits by (dataset, composition).
    """
    rng = np.random.default_rng(rng)
    root = int(rng.integers(2 ** 31))
    grouped = {}
    for data, comp in assignments:
        if cache is not None and (data, comp) in cache:
            theta = cache[data, comp]
        else:
            theta, _ = map_fit(data, comp, prior, restarts,
                               np.random.default_rng(fit_seed(root, data, comp)), maxfev)
            if cache is not None:
                cache[data, comp] = theta
        grouped.setdefault(comp, []).append(theta)
    return {comp: HyperDist(comp, tuple(atoms), fallback=prior)
            for comp, atoms in grouped.items()}


def lookup(dists: dict, comp, prior: HyperPrior) -> HyperDist:
    dist = dists.get(comp)
    return dist if dist is not None else HyperDist(comp, fallback=prior)


def bic(data: Dataset, comp, prior: HyperPrior, restarts=3, rng=None, maxfev=500,
        method="L-BFGS-B"):
    """``-2 lml(theta*) + |theta| log n`` at the MAP fit; lower is better.

    Returns ``(bic, theta)``.
    """
    if data.n < 2:
        raise ValueError("BIC needs at least two observations")
    theta, _ = map_fit(data, comp, prior, restarts, rng, maxfev, method)
    score = -2.0 * log_marginal_likelihood(data, comp, theta) + len(theta) * math.log(data.n)
    return score, theta
