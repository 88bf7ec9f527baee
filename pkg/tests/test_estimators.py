import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from kernel_trajectory.data import gen_synthetic, toy_spec
from kernel_trajectory.gp import Dataset, posterior_predict
from kernel_trajectory.grammar import parse
from kernel_trajectory.estimators import (
    CKSRegressor,
    CompositionalGPRegressor,
    TrajectoryKernelSelector,
)


def se_xy(seed=0, n=30):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 5, size=(n, 1))
    return X, np.sin(X[:, 0]) + 0.1 * rng.normal(size=n)


class TestCompositionalGP:
    def test_params_round_trip(self):
        est = CompositionalGPRegressor(kernel="LIN0 + PER0", restarts=2)
        assert clone(est).get_params() == est.get_params()
        assert est.set_params(maxfev=10).maxfev == 10

    def test_fit_predict_matches_posterior(self):
        X, y = se_xy()
        est = CompositionalGPRegressor(random_state=1).fit(X, y)
        Xs = np.linspace(0, 5, 7)[:, None]
        mean, std = est.predict(Xs, return_std=True)
        pred = posterior_predict(Dataset(X, y), Xs, parse("SE0"), est.theta_)
        np.testing.assert_allclose(mean, pred.mean)
        np.testing.assert_allclose(std ** 2, pred.variance)
        assert est.score(X, y) > 0.9

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            CompositionalGPRegressor().predict([[0.0]])

    def test_dim_check(self):
        X, y = se_xy()
        with pytest.raises(ValueError):
            CompositionalGPRegressor(kernel="SE1").fit(X, y)
        est = CompositionalGPRegressor().fit(X, y)
        with pytest.raises(ValueError):
            est.predict(np.zeros((2, 2)))

    def test_empty_kernel(self):
        with pytest.raises(ValueError):
            CompositionalGPRegressor(kernel="").fit(*se_xy())


class TestCKS:
    def test_fit(self):
        X, y = se_xy(n=20)
        est = CKSRegressor(max_depth=1, restarts=1, maxfev=100).fit(X, y)
        assert len(est.search_trace_) >= 1
        assert est.predict(X).shape == (20,)

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            CKSRegressor().fit([[0.0]], [1.0])


@pytest.fixture(scope="module")
def fitted():
    cohort = gen_synthetic(toy_spec(schedule=(3, 4), seed=0))
    est = TrajectoryKernelSelector(n_sweeps=2, mh_iters=2, n_evidence_samples=4,
                                   n_new_table_draws=2, restarts=1, maxfev=50)
    return est.fit(cohort), cohort


class TestTrajectorySelector:
    def test_clone(self):
        est = TrajectoryKernelSelector(n_sweeps=7)
        assert clone(est).get_params()["n_sweeps"] == 7

    def test_fit_and_predict(self, fitted):
        est, cohort = fitted
        assert est.trace_.shape == (2,) and est.n_features_in_ == 1
        user = cohort.users[0]
        path = est.predict(user)
        assert len(path) == 2
        b = user.batches[0]
        assert est.predict_next(None, b.X, b.y) == path[0]
        assert est.predict_next(path[0], user.cumulative(2).X, user.cumulative(2).y) == path[1]

    def test_accepts_xy_batches(self, fitted):
        est, cohort = fitted
        user = cohort.users[3]
        pairs = [(b.X, b.y) for b in user.batches]
        assert est.predict(pairs) == est.predict(user)

    def test_empty_cohort(self):
        with pytest.raises(ValueError):
            TrajectoryKernelSelector().fit([])

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            TrajectoryKernelSelector().predict([([[0.0]], [0.0])])

    def test_mixed_dims(self):
        users = [[(np.zeros((2, 1)), np.zeros(2))], [(np.zeros((2, 2)), np.zeros(2))]]
        with pytest.raises(ValueError):
            TrajectoryKernelSelector().fit(users)
