"""Multi-user cohorts: synthetic GP draws and CSV ingestion."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
from sklearn.preprocessing import MinMaxScaler

from .gp import Dataset, sample_prior
from .grammar import Composition, HyperParams, parse, render

__all__ = ["CohortSpec", "User", "Cohort", "gen_synthetic", "write_cohort", "read_cohort",
           "load_csv_cohort", "toy_spec"]


@dataclass(frozen=True)
class CohortSpec:
    """Groups of ``(composition, theta, user count)`` sharing one batch schedule."""

    groups: tuple
    batch_schedule: tuple = (3, 4, 10, 20, 50, 100)
    seed: int = 0
    dim: int = 1
    x_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if not self.batch_schedule or min(self.batch_schedule) < 1:
            raise ValueError("batch sizes must be >= 1")
        for comp, theta, count in self.groups:
            if theta.composition != comp or count < 0:
                raise ValueError("each group needs matching hyperparameters and count >= 0")
            if comp.max_dim >= self.dim:
                raise ValueError(f"{render(comp)!r} needs more than {self.dim} dims")

    def to_json(self):
        return {
            "groups": [{"composition": render(c), "theta": t.values.tolist(), "users": n}
                       for c, t, n in self.groups],
            "batch_schedule": list(self.batch_schedule),
            "seed": self.seed,
            "dim": self.dim,
            "x_range": list(self.x_range),
        }

    @classmethod
    def from_json(cls, doc):
        groups = []
        for g in doc["groups"]:
            comp = parse(g["composition"])
            groups.append((comp, HyperParams(comp, g["theta"]), int(g["users"])))
        return cls(tuple(groups), tuple(doc["batch_schedule"]), int(doc["seed"]),
                   int(doc["dim"]), tuple(doc["x_range"]))


@dataclass
class User:
    user_id: str
    batches: List[Dataset]
    label: Optional[Composition] = None
    latent: Optional[List[np.ndarray]] = None

    @property
    def n_batches(self):
        return len(self.batches)

    def cumulative(self, t) -> Dataset:
        """All observations in batches ``1..t`` (1-based)."""
        if not 1 <= t <= len(self.batches):
            raise IndexError(f"user {self.user_id} has no batch {t}")
        return Dataset.concat(self.batches[:t])


@dataclass
class Cohort:
    users: List[User]
    scaler: Optional[MinMaxScaler] = field(default=None, repr=False)

    def __len__(self):
        return len(self.users)

    def __iter__(self):
        return iter(self.users)

    @property
    def labels(self):
        return [u.label for u in self.users]


def toy_spec(n_per_group=3, seed=0, lin_per=None, se=None, x_range=(0.0, 10.0),
             schedule=(3, 4, 10, 20, 50, 100)) -> CohortSpec:
    """Two-group LIN+PER / SE cohort; hyperparameters come from the caller's config."""
    lp = parse("LIN0 + PER0")
    s = parse("SE0")
    lin_per = lin_per if lin_per is not None else HyperParams(lp, [0.0, 0.3, 1.0, 2.0, 1.0, 0.5])
    se = se if se is not None else HyperParams(s, [1.0, 1.0, 0.5])
    return CohortSpec(((lp, lin_per, n_per_group), (s, se, n_per_group)),
                      tuple(schedule), seed, 1, tuple(x_range))


def gen_synthetic(spec: CohortSpec) -> Cohort:
    """One joint GP draw per user over all its inputs, split into batches."""
    n_users = sum(n for _, _, n in spec.groups)
    seqs = np.random.SeedSequence(spec.seed).spawn(n_users)
    bounds = np.cumsum(spec.batch_schedule)[:-1]
    lo, hi = spec.x_range
    users = []
    for comp, theta, count in spec.groups:
        for _ in range(count):
            rng = np.random.default_rng(seqs[len(users)])
            X = rng.uniform(lo, hi, size=(sum(spec.batch_schedule), spec.dim))
            y, f = sample_prior(comp, theta, X, rng, return_latent=True)
            batches = [Dataset(xb, yb) for xb, yb in zip(np.split(X, bounds), np.split(y, bounds))]
            users.append(User(f"u{len(users)}", batches, comp, np.split(f, bounds)))
    return Cohort(users)


def write_cohort(cohort: Cohort, csv_path, manifest_path=None, spec: CohortSpec = None):
    """Write ``user_id, t, x0.., y[, f]`` rows plus an optional JSON manifest."""
    dim = cohort.users[0].batches[0].dim
    has_latent = all(u.latent is not None for u in cohort.users)
    columns = ["user_id", "t"] + [f"x{d}" for d in range(dim)] + ["y"]
    if has_latent:
        columns.append("f")
    os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for u in cohort.users:
            for t, b in enumerate(u.batches, start=1):
                for i in range(b.n):
                    row = [u.user_id, t] + [repr(float(v)) for v in b.X[i]] + [repr(float(b.y[i]))]
                    if has_latent:
                        row.append(repr(float(u.latent[t - 1][i])))
                    w.writerow(row)
    if manifest_path is not None:
        doc = {
            "csv": os.path.basename(csv_path),
            "columns": {"user": "user_id", "batch": "t",
                        "covariates": [f"x{d}" for d in range(dim)],
                        "target": "y", "latent": "f" if has_latent else None},
            "labels": {u.user_id: (render(u.label) if u.label is not None else None)
                       for u in cohort.users},
            "spec": spec.to_json() if spec is not None else None,
            "seed": spec.seed if spec is not None else None,
        }
        with open(manifest_path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_cohort(manifest_path) -> Cohort:
    """Load a cohort written by :func:`write_cohort`, batches taken from ``t``."""
    with open(manifest_path) as fh:
        doc = json.load(fh)
    cols = doc["columns"]
    path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), doc["csv"])
    cohort = load_csv_cohort(path, cols["target"], user_column=cols["user"],
                             covariate_columns=cols["covariates"], batch_column=cols["batch"],
                             scale=False)
    frame = None
    if cols.get("latent"):
        frame = pd.read_csv(path, dtype={cols["user"]: str}, float_precision="round_trip")
    for u in cohort.users:
        label = doc["labels"].get(u.user_id)
        u.label = parse(label) if label is not None else None
        if frame is not None:
            rows = frame[frame[cols["user"]] == u.user_id]
            u.latent = [rows[rows[cols["batch"]] == t][cols["latent"]].to_numpy(float)
                        for t in sorted(rows[cols["batch"]].unique())]
    return cohort


def load_csv_cohort(path, target_column, chunk_size=40, scale=True, user_column="user_id",
                    covariate_columns=None, batch_column=None, scaler=None, users=None) -> Cohort:
    """Read one row per observation, users in file order, rows in time order.

    Rows with a missing target are dropped.  Covariates are min-max scaled
    with ``scaler`` when given, else with a scaler fit on this file; a
    constant column maps to 0.  Batches are consecutive ``chunk_size``
    chunks (last one may be short) unless ``batch_column`` names them.
    ``users`` restricts the cohort to the listed ids, e.g. a training split.
    """
    frame = pd.read_csv(path, dtype={user_column: str}, float_precision="round_trip")
    needed = [user_column, target_column] + ([batch_column] if batch_column else [])
    if covariate_columns is None:
        covariate_columns = [c for c in frame.columns if c not in needed]
    for c in needed + list(covariate_columns):
        if c not in frame.columns:
            raise KeyError(f"unknown column {c!r}")
    order = list(dict.fromkeys(frame[user_column].to_numpy()))
    if users is not None:
        wanted = [str(u) for u in users]
        unknown = sorted(set(wanted) - set(order))
        if unknown:
            raise KeyError(f"unknown users {unknown}")
        order = [u for u in order if u in set(wanted)]
        frame = frame[frame[user_column].isin(order)]
    frame = frame[frame[target_column].notna()]
    numeric = list(covariate_columns) + [target_column]
    for c in numeric:
        try:
            frame[c] = pd.to_numeric(frame[c], errors="raise")
        except (ValueError, TypeError) as exc:
            raise ValueError(f"non-numeric value in column {c!r}: {exc}") from None
    X_all = frame[list(covariate_columns)].to_numpy(float)
    if scale:
        if scaler is None:
            scaler = MinMaxScaler().fit(X_all)
        X_all = scaler.transform(X_all)
    users = []
    ids = frame[user_column].to_numpy()
    y_all = frame[target_column].to_numpy(float)
    batch_ids = frame[batch_column].to_numpy() if batch_column else None
    for uid in order:
        idx = np.flatnonzero(ids == uid)
        if len(idx) == 0:
            raise ValueError(f"user {uid!r} has no rows with an observed target")
        X, y = X_all[idx], y_all[idx]
        if batch_ids is not None:
            b = batch_ids[idx]
            keys = list(dict.fromkeys(b))
            batches = [Dataset(X[b == k], y[b == k]) for k in keys]
        else:
            batches = [Dataset(X[i:i + chunk_size], y[i:i + chunk_size])
                       for i in range(0, len(y), chunk_size)]
        users.append(User(str(uid), batches))
    if not users:
        raise ValueError("no users with observed targets")
    return Cohort(users, scaler if scale else None)
