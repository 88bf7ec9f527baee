"""scikit-learn style wrappers around fixed-kernel GPs, CKS and the trajectory model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cks import cks_search
from .data import Cohort
from .gp import Dataset, log_marginal_likelihood, posterior_predict
from .grammar import ROOT, BaseTerm, KINDS, Composition, build_pool, parse, render
from .hyper import HyperPrior, map_fit
from .trajectory import SamplerConfig, TrajectoryModel, predict_next, select_structure, train

__all__ = ["CompositionalGPRegressor", "CKSRegressor", "TrajectoryKernelSelector"]


def _prior(prior):
    return prior if isinstance(prior, HyperPrior) else HyperPrior.preset(prior)


def _composition(kernel):
    return kernel if isinstance(kernel, Composition) else parse(kernel)


def _check_dims(comp, n_features):
    if comp.max_dim >= n_features:
        raise ValueError(f"{render(comp)!r} uses dim {comp.max_dim} but X has "
                         f"{n_features} features")


class _GPPredictMixin:
    def predict(self, X, return_std=False):
        """Posterior mean at ``X``; ``return_std`` adds the observation-space std."""
        check_is_fitted(self, "theta_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        pred = posterior_predict(self.train_, X, self.composition_, self.theta_)
        if return_std:
            return pred.mean, np.sqrt(pred.variance)
        return pred.mean


class CompositionalGPRegressor(_GPPredictMixin, RegressorMixin, BaseEstimator):
    """Exact GP with a fixed composition and MAP hyperparameters.

    Parameters
    ----------
    kernel : str or Composition
        e.g. ``"LIN0 + PER0"``.
    prior : str or HyperPrior
        Hyperparameter prior or preset name.
    restarts, maxfev : int
        Optimizer budget.
    random_state : int or None
    """

    def __init__(self, kernel="SE0", prior="toy", restarts=3, maxfev=500, random_state=0):
        self.kernel = kernel
        self.prior = prior
        self.restarts = restarts
        self.maxfev = maxfev
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        comp = _composition(self.kernel)
        if comp.is_root:
            raise ValueError("kernel must be a non-empty composition")
        _check_dims(comp, X.shape[1])
        self.n_features_in_ = X.shape[1]
        self.train_ = Dataset(X, y)
        self.composition_ = comp
        self.theta_, self.objective_ = map_fit(self.train_, comp, _prior(self.prior),
                                               self.restarts, self.random_state, self.maxfev)
        self.log_marginal_likelihood_ = log_marginal_likelihood(self.train_, comp, self.theta_)
        return self


class CKSRegressor(_GPPredictMixin, RegressorMixin, BaseEstimator):
    """GP whose composition is chosen by greedy BIC search over base kernels."""

    def __init__(self, max_depth=3, prior="toy", restarts=3, maxfev=500, random_state=0):
        self.max_depth = max_depth
        self.prior = prior
        self.restarts = restarts
        self.maxfev = maxfev
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[0] < 2:
            raise ValueError("CKS needs at least two observations")
        self.n_features_in_ = X.shape[1]
        self.train_ = Dataset(X, y)
        bases = [BaseTerm(k, d) for k in KINDS for d in range(X.shape[1])]
        self.composition_, self.theta_, self.search_trace_ = cks_search(
            self.train_, bases, self.max_depth, _prior(self.prior), self.restarts,
            self.random_state, self.maxfev)
        return self


def _as_batches(user):
    """A user's batches from a ``User``, a list of ``Dataset`` or ``(X, y)`` pairs."""
    batches = getattr(user, "batches", user)
    out = []
    for b in batches:
        if isinstance(b, Dataset):
            out.append(b)
        else:
            X, y = b
            X, y = check_X_y(X, y, y_numeric=True)
            out.append(Dataset(X, y))
    if not out:
        raise ValueError("a user needs at least one batch")
    return out


class TrajectoryKernelSelector(BaseEstimator):
    """Learns kernel trajectories on a cohort and predicts compositions without refitting.

    ``fit`` takes a :class:`Cohort` (or a list of users, each a list of
    ``(X, y)`` batches).  ``predict`` maps one user's batches to the
    composition chosen after each batch.
    """

    def __init__(self, pool="toy", prior="toy", max_degree=2, alpha=1.0, n_sweeps=50,
                 mh_iters=20, n_evidence_samples=10, n_new_table_draws=5, restarts=3,
                 maxfev=500, select_top=0, random_state=0):
        self.pool = pool
        self.prior = prior
        self.max_degree = max_degree
        self.alpha = alpha
        self.n_sweeps = n_sweeps
        self.mh_iters = mh_iters
        self.n_evidence_samples = n_evidence_samples
        self.n_new_table_draws = n_new_table_draws
        self.restarts = restarts
        self.maxfev = maxfev
        self.select_top = select_top
        self.random_state = random_state

    def fit(self, cohort, y=None):
        users = [_as_batches(u) for u in (cohort.users if isinstance(cohort, Cohort) else cohort)]
        if not users:
            raise ValueError("cohort is empty")
        dims = {b.dim for u in users for b in u}
        if len(dims) != 1:
            raise ValueError("all batches need the same number of features")
        self.n_features_in_ = dims.pop()
        pool = (self.pool if not isinstance(self.pool, str)
                else build_pool(self.n_features_in_, self.max_degree, self.pool))
        cfg = SamplerConfig(self.alpha, self.n_evidence_samples, self.n_new_table_draws,
                            self.mh_iters, self.restarts, self.maxfev)
        seed = 0 if self.random_state is None else int(self.random_state)
        ids = list(_cohort_ids(cohort, len(users)))
        model = TrajectoryModel(pool, _prior(self.prior), cfg, seed, ids)
        data = {(m, t): Dataset.concat(u[:t]) for m, u in enumerate(users)
                for t in range(1, len(u) + 1)}
        snapshots = []
        train(model, data, self.n_sweeps, seed,
              callback=lambda i, mdl: snapshots.append(mdl.to_json()))
        self.trace_ = np.asarray(model.trace)
        if snapshots and self.select_top > 0:
            model = select_structure([TrajectoryModel.from_json(s) for s in snapshots],
                                     self.select_top)
        self.model_ = model
        return self

    def predict_next(self, prev, X, y):
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, y_numeric=True)
        prev = ROOT if prev is None else _composition(prev)
        return predict_next(self.model_, prev, Dataset(X, y))

    def predict(self, user):
        """Compositions for ``t = 1..T`` of one user, from cumulative data."""
        check_is_fitted(self, "model_")
        batches = _as_batches(user)
        prev, out = ROOT, []
        for t in range(1, len(batches) + 1):
            prev = predict_next(self.model_, prev, Dataset.concat(batches[:t]))
            out.append(prev)
        return out


def _cohort_ids(cohort, n):
    if isinstance(cohort, Cohort):
        return [u.user_id for u in cohort.users]
    return [f"u{i}" for i in range(n)]
