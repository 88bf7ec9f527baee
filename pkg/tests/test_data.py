import json

import numpy as np
import pandas as pd
import pytest

from kernel_trajectory.data import (
    CohortSpec,
    gen_synthetic,
    load_csv_cohort,
    read_cohort,
    toy_spec,
    write_cohort,
)
from kernel_trajectory.gp import Dataset
from kernel_trajectory.grammar import HyperParams, parse


class TestSynthetic:
    def test_toy_shape(self):
        cohort = gen_synthetic(toy_spec())
        assert len(cohort) == 6
        assert [str(u.label) for u in cohort] == ["LIN0 + PER0"] * 3 + ["SE0"] * 3
        for u in cohort:
            assert [b.n for b in u.batches] == [3, 4, 10, 20, 50, 100]
            assert u.cumulative(6).n == 187

    def test_test_cohort(self):
        cohort = gen_synthetic(toy_spec(n_per_group=50, seed=1))
        assert len(cohort) == 100
        assert sum(u.label == parse("SE0") for u in cohort) == 50

    def test_cumulative_is_concatenation(self):
        u = gen_synthetic(toy_spec(seed=3)).users[0]
        for t in range(1, 7):
            cum = u.cumulative(t)
            assert cum == Dataset.concat(u.batches[:t])
            assert u.cumulative(t - 1).n < cum.n if t > 1 else True
        with pytest.raises(IndexError):
            u.cumulative(7)

    def test_one_realization_per_user(self):
        # the latent function is a single draw: y - f has the noise variance
        # and the batches of one user are jointly correlated through f
        cohort = gen_synthetic(toy_spec(n_per_group=20, seed=4))
        resid = np.concatenate([np.concatenate(u.latent) - u.cumulative(6).y for u in cohort])
        assert np.var(resid) == pytest.approx(0.5, rel=0.1)

    def test_seeded(self):
        a, b = gen_synthetic(toy_spec(seed=9)), gen_synthetic(toy_spec(seed=9))
        for ua, ub in zip(a, b):
            assert ua.cumulative(6) == ub.cumulative(6)
        c = gen_synthetic(toy_spec(seed=10))
        assert a.users[0].cumulative(6) != c.users[0].cumulative(6)

    def test_inputs_in_range(self):
        spec = toy_spec(x_range=(0.0, 1.0))
        X = np.vstack([u.cumulative(6).X for u in gen_synthetic(spec)])
        assert X.min() >= 0.0 and X.max() <= 1.0

    def test_spec_validation(self):
        comp = parse("SE1")
        with pytest.raises(ValueError):
            CohortSpec(((comp, HyperParams.from_roles(comp), 1),), dim=1)
        with pytest.raises(ValueError):
            toy_spec(schedule=(3, 0))

    def test_spec_json_round_trip(self):
        spec = toy_spec(seed=5)
        again = CohortSpec.from_json(json.loads(json.dumps(spec.to_json())))
        assert again.to_json() == spec.to_json()


class TestFiles:
    def test_write_read_round_trip(self, tmp_path):
        spec = toy_spec(seed=2)
        cohort = gen_synthetic(spec)
        write_cohort(cohort, tmp_path / "c.csv", tmp_path / "m.json", spec)
        back = read_cohort(tmp_path / "m.json")
        assert [u.user_id for u in back] == [u.user_id for u in cohort]
        for a, b in zip(cohort, back):
            assert a.label == b.label
            for ba, bb in zip(a.batches, b.batches):
                np.testing.assert_array_equal(ba.X, bb.X)
                np.testing.assert_array_equal(ba.y, bb.y)
            for fa, fb in zip(a.latent, b.latent):
                np.testing.assert_array_equal(fa, fb)

    def test_bit_identical_files(self, tmp_path):
        for d in ("a", "b"):
            spec = toy_spec(seed=7)
            write_cohort(gen_synthetic(spec), tmp_path / d / "c.csv", tmp_path / d / "m.json", spec)
        assert (tmp_path / "a" / "c.csv").read_bytes() == (tmp_path / "b" / "c.csv").read_bytes()
        assert (tmp_path / "a" / "m.json").read_bytes() == (tmp_path / "b" / "m.json").read_bytes()


def write_frame(path, frame):
    frame.to_csv(path, index=False)
    return path


class TestCSV:
    def test_chunking(self, tmp_path):
        n = 167
        frame = pd.DataFrame({"user_id": ["a"] * n, "x": np.arange(n, dtype=float),
                              "y": np.ones(n)})
        cohort = load_csv_cohort(write_frame(tmp_path / "d.csv", frame), "y", chunk_size=40)
        assert [b.n for b in cohort.users[0].batches] == [40, 40, 40, 40, 7]

    def test_constant_column_scales_to_zero(self, tmp_path):
        frame = pd.DataFrame({"user_id": ["a", "a", "b"], "c": [3.0, 3.0, 3.0],
                              "x": [1.0, 2.0, 5.0], "y": [0.0, 1.0, 2.0]})
        cohort = load_csv_cohort(write_frame(tmp_path / "d.csv", frame), "y")
        X = np.vstack([u.cumulative(u.n_batches).X for u in cohort])
        np.testing.assert_array_equal(X[:, 0], 0.0)
        np.testing.assert_allclose(X[:, 1], [0.0, 0.25, 1.0])

    def test_missing_targets_dropped(self, tmp_path):
        frame = pd.DataFrame({"user_id": ["a"] * 4, "x": [0.0, 1.0, 2.0, 3.0],
                              "y": [1.0, np.nan, 2.0, 3.0]})
        cohort = load_csv_cohort(write_frame(tmp_path / "d.csv", frame), "y", scale=False)
        np.testing.assert_array_equal(cohort.users[0].cumulative(1).X[:, 0], [0.0, 2.0, 3.0])

    def test_training_scaler_reused(self, tmp_path):
        frame = pd.DataFrame({"user_id": ["a", "a", "b", "b"], "x": [0.0, 10.0, 5.0, 20.0],
                              "y": [0.0, 1.0, 2.0, 3.0]})
        path = write_frame(tmp_path / "d.csv", frame)
        train = load_csv_cohort(path, "y", users=["a"])
        test = load_csv_cohort(path, "y", users=["b"], scaler=train.scaler)
        np.testing.assert_allclose(test.users[0].cumulative(1).X[:, 0], [0.5, 2.0])

    def test_unknown_column(self, tmp_path):
        frame = pd.DataFrame({"user_id": ["a"], "x": [0.0], "y": [1.0]})
        with pytest.raises(KeyError):
            load_csv_cohort(write_frame(tmp_path / "d.csv", frame), "target")

    def test_non_numeric(self, tmp_path):
        frame = pd.DataFrame({"user_id": ["a", "a"], "x": ["1.0", "oops"], "y": [1.0, 2.0]})
        with pytest.raises(ValueError):
            load_csv_cohort(write_frame(tmp_path / "d.csv", frame), "y")

    def test_empty_user(self, tmp_path):
        frame = pd.DataFrame({"user_id": ["a", "b"], "x": [0.0, 1.0], "y": [1.0, np.nan]})
        with pytest.raises(ValueError):
            load_csv_cohort(write_frame(tmp_path / "d.csv", frame), "y")

    def test_export_then_load(self, tmp_path):
        rng = np.random.default_rng(0)
        frame = pd.DataFrame({"user_id": np.repeat(["u1", "u2"], 50),
                              "x0": rng.uniform(size=100), "x1": rng.normal(size=100),
                              "y": rng.normal(size=100)})
        path = write_frame(tmp_path / "d.csv", frame)
        first = load_csv_cohort(path, "y", chunk_size=40)
        # re-export the scaled cohort with explicit batch ids and reload it
        rows = []
        for u in first:
            for t, b in enumerate(u.batches, 1):
                for x, y in zip(b.X, b.y):
                    rows.append({"user_id": u.user_id, "t": t, "x0": x[0], "x1": x[1], "y": y})
        again = load_csv_cohort(write_frame(tmp_path / "e.csv", pd.DataFrame(rows)), "y",
                                scale=False, batch_column="t", covariate_columns=["x0", "x1"])
        for a, b in zip(first, again):
            for ba, bb in zip(a.batches, b.batches):
                np.testing.assert_array_equal(ba.X, bb.X)
                np.testing.assert_array_equal(ba.y, bb.y)
