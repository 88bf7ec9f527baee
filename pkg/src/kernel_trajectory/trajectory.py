"""Per-parent Chinese restaurant processes over kernel-composition transitions.

Every composition ``K`` owns a restaurant whose customers are the cumulative
datasets ``D[m, t]`` with ``K[m, t-1] == K`` (the root restaurant, keyed by
the empty composition, seats every ``D[m, 1]``).  A table carries the next
composition.  Training alternates seating, plating and empirical
hyperparameter updates; prediction walks the learned graph greedily.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .gp import Dataset, log_marginal_likelihood_batch
from .grammar import (
    ROOT,
    CandidatePool,
    Composition,
    HyperParams,
    h0_log_prob,
    h0_sample,
    mh_propose,
    parse,
    render,
)
from .hyper import (
    FitFailure,
    HyperDist,
    HyperPrior,
    empirical_update,
    evidence,
    logmeanexp,
    lookup,
)

__all__ = [
    "SamplerConfig",
    "Table",
    "Restaurant",
    "TrajectoryModel",
    "NewTable",
    "log_eppf",
    "seat_log_probs",
    "gibbs_sweep",
    "mh_chain",
    "plate_table",
    "initialize",
    "train",
    "predict_next",
    "predict_trajectory",
    "export_dot",
    "check_invariants",
    "structure_complexity",
    "select_structure",
]

log = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    alpha: float = 1.0
    n_evidence_samples: int = 10
    n_new_table_draws: int = 5
    mh_iters: int = 20
    restarts: int = 3
    maxfev: int = 500
    flat_evidence: bool = False
    leave_user_out: bool = True
    plate_with_prior: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.n_evidence_samples < 1 or self.n_new_table_draws < 1:
            raise ValueError("sample counts must be >= 1")
        if self.mh_iters < 0 or self.restarts < 1:
            raise ValueError("mh_iters must be >= 0 and restarts >= 1")


@dataclass
class Table:
    id: int
    composition: Composition
    customers: set = field(default_factory=set)

    @property
    def count(self):
        return len(self.customers)


@dataclass
class Restaurant:
    parent: Composition
    tables: Dict[int, Table] = field(default_factory=dict)
    alpha: float = 1.0

    @property
    def n_customers(self):
        return sum(t.count for t in self.tables.values())

    def table_for(self, comp) -> Optional[Table]:
        for t in self.tables.values():
            if t.composition == comp:
                return t
        return None


@dataclass(frozen=True)
class NewTable:
    """Seating target for an unoccupied table.

    ``candidates`` are the H0 draws used to approximate the new-table
    evidence, with their individual log evidences.
    """

    candidates: tuple
    log_evidences: tuple


class TrajectoryModel:
    """Restaurants keyed by parent composition plus hyperparameter tables."""

    def __init__(self, pool: CandidatePool, prior: HyperPrior, config: SamplerConfig = None,
                 seed=0, user_ids=()):
        self.pool = pool
        self.prior = prior
        self.config = config if config is not None else SamplerConfig()
        self.seed = int(seed)
        self.user_ids = list(user_ids)
        self.restaurants: Dict[Composition, Restaurant] = {}
        self.hyper_dists: Dict[Composition, HyperDist] = {}
        self.seats: Dict[tuple, tuple] = {}
        self.trace: List[float] = []
        self._next_table = 0
        # training-time state, never serialized
        self.data: Dict[tuple, Dataset] = {}
        self._lml_cache: dict = {}
        self._map_cache: dict = {}
        self._atom_users: dict = {}

    # -- structure ---------------------------------------------------------

    def restaurant(self, parent) -> Restaurant:
        rest = self.restaurants.get(parent)
        if rest is None:
            rest = self.restaurants[parent] = Restaurant(parent, alpha=self.config.alpha)
        return rest

    def composition_of(self, key) -> Composition:
        parent, tid = self.seats[key]
        return self.restaurants[parent].tables[tid].composition

    def parent_of(self, key) -> Composition:
        m, t = key
        return ROOT if t == 1 else self.composition_of((m, t - 1))

    def seat(self, key, parent, comp) -> Table:
        """Seat ``key`` at the table serving ``comp`` in ``parent``'s restaurant."""
        rest = self.restaurant(parent)
        table = rest.table_for(comp)
        if table is None:
            table = Table(self._next_table, comp)
            self._next_table += 1
            rest.tables[table.id] = table
        table.customers.add(key)
        self.seats[key] = (parent, table.id)
        return table

    def unseat(self, key):
        parent, tid = self.seats.pop(key)
        rest = self.restaurants[parent]
        table = rest.tables[tid]
        table.customers.discard(key)
        if not table.customers:
            del rest.tables[tid]
        if not rest.tables:
            del self.restaurants[parent]
        return table.composition

    def rehome_successor(self, key):
        """Move ``(m, t+1)`` under the current composition of ``(m, t)``."""
        m, t = key
        succ = (m, t + 1)
        if succ not in self.seats:
            return
        comp = self.composition_of(succ)
        self.unseat(succ)
        self.seat(succ, self.composition_of(key), comp)

    @property
    def compositions(self):
        comps = {ROOT}
        for parent, rest in self.restaurants.items():
            comps.add(parent)
            comps.update(t.composition for t in rest.tables.values())
        return sorted(comps, key=render)

    def transitions(self):
        """``(parent, child, n_child, n_parent)`` for every occupied table."""
        out = []
        for parent in sorted(self.restaurants, key=render):
            rest = self.restaurants[parent]
            total = rest.n_customers
            for table in sorted(rest.tables.values(), key=lambda t: render(t.composition)):
                out.append((parent, table.composition, table.count, total))
        return out

    # -- evidence ----------------------------------------------------------

    def dist(self, comp) -> HyperDist:
        return lookup(self.hyper_dists, comp, self.prior)

    def log_evidence(self, data: Dataset, comp, rng, key=None) -> float:
        """Log evidence under the composition's hyperparameter table.

        Empirical tables are a finite mixture and are evaluated exactly
        over all atoms.  For a training customer ``key = (user, t)`` with
        ``leave_user_out`` set, atoms fitted to the same user are dropped so
        a composition is not scored by its own fit to the data.  Tables
        with no usable atoms fall back to :meth:`prior_evidence`.
        """
        if self.config.flat_evidence:
            return 0.0
        dist = self.dist(comp)
        atoms = list(dist.atoms)
        owners = self._atom_users.get(comp)
        if key is not None and self.config.leave_user_out and owners is not None:
            atoms = [a for a, u in zip(atoms, owners) if u != key[0]]
        if not atoms:
            return self.prior_evidence(data, comp, rng, key)
        lml = np.empty(len(atoms))
        pending = []
        for i, atom in enumerate(atoms):
            ck = (key, comp, atom.values.tobytes()) if key is not None else None
            if ck is not None and ck in self._lml_cache:
                lml[i] = self._lml_cache[ck]
            else:
                pending.append((i, ck))
        if pending:
            fresh = log_marginal_likelihood_batch(
                data, comp, np.stack([atoms[i].values for i, _ in pending]))
            for (i, ck), value in zip(pending, fresh):
                lml[i] = value
                if ck is not None:
                    self._lml_cache[ck] = value
        if not np.isfinite(lml).any():
            raise FitFailure(f"all evidence samples failed for {render(comp)!r}")
        return logmeanexp(lml)

    def prior_evidence(self, data: Dataset, comp, rng, key=None) -> float:
        """Monte-Carlo evidence over ``n_evidence_samples`` prior draws.

        For a training customer the draws are fixed by ``(seed, key, comp)``
        so the estimate is a deterministic, memoized function of the state.
        """
        if self.config.flat_evidence:
            return 0.0
        S = self.config.n_evidence_samples
        fallback = HyperDist(comp, fallback=self.prior)
        if key is None:
            return evidence(data, comp, fallback, S, rng)
        ck = (key, comp, None)
        if ck not in self._lml_cache:
            draw_rng = np.random.default_rng([self.seed, zlib.crc32(repr(key).encode()),
                                              zlib.crc32(render(comp).encode())])
            self._lml_cache[ck] = evidence(data, comp, fallback, S, draw_rng)
        return self._lml_cache[ck]

    def update_hyper_dists(self, rng):
        """Refit the empirical hyperparameter tables from current assignments."""
        keys = sorted(self.data)
        assignments = [(self.data[k], self.composition_of(k)) for k in keys]
        self.hyper_dists = empirical_update(assignments, self.prior, self.config.restarts,
                                            rng, cache=self._map_cache,
                                            maxfev=self.config.maxfev)
        self._atom_users = {}
        for k, (_, comp) in zip(keys, assignments):
            self._atom_users.setdefault(comp, []).append(k[0])

    def customer_evidence(self, key, comp, rng):
        return self.log_evidence(self.data.get(key), comp, rng, key)

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        rests = []
        for parent in sorted(self.restaurants, key=render):
            rest = self.restaurants[parent]
            rests.append({
                "parent": render(parent),
                "alpha": rest.alpha,
                "tables": [{"id": t.id, "composition": render(t.composition),
                            "customers": sorted([list(c) for c in t.customers])}
                           for t in sorted(rest.tables.values(), key=lambda t: t.id)],
            })
        return {
            "format": "kernel-trajectory-model/1",
            "pool": {"kernels": [str(k) for k in self.pool.kernels],
                     "inclusion_prob": list(self.pool.inclusion_prob)},
            "prior": {role: list(spec) for role, spec in sorted(self.prior.roles.items())},
            "alpha": self.config.alpha,
            "config": {k: getattr(self.config, k) for k in sorted(vars(self.config))},
            "restaurants": rests,
            "hyper_dists": {render(c): {"atoms": [a.values.tolist() for a in d.atoms],
                                        "weights": list(d.weights)}
                            for c, d in sorted(self.hyper_dists.items(),
                                               key=lambda kv: render(kv[0]))},
            "seed": self.seed,
            "users": list(self.user_ids),
            "trace": list(self.trace),
            "next_table": self._next_table,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc):
        from .grammar import _single_term
        pool = CandidatePool(tuple(_single_term(k) for k in doc["pool"]["kernels"]),
                             tuple(doc["pool"]["inclusion_prob"]))
        prior = HyperPrior({r: (s[0], float(s[1]), float(s[2])) for r, s in doc["prior"].items()})
        model = cls(pool, prior, SamplerConfig(**doc["config"]), doc["seed"], doc.get("users", ()))
        for r in doc["restaurants"]:
            parent = parse(r["parent"])
            rest = model.restaurants[parent] = Restaurant(parent, alpha=r["alpha"])
            for t in r["tables"]:
                table = Table(t["id"], parse(t["composition"]),
                              {tuple(c) for c in t["customers"]})
                rest.tables[table.id] = table
                for c in table.customers:
                    model.seats[c] = (parent, table.id)
        for name, d in doc["hyper_dists"].items():
            comp = parse(name)
            atoms = tuple(HyperParams(comp, a) for a in d["atoms"])
            model.hyper_dists[comp] = HyperDist(comp, atoms, tuple(d["weights"]), prior)
        model.trace = list(doc["trace"])
        model._next_table = doc.get("next_table", 1 + max(
            (tid for _, tid in model.seats.values()), default=-1))
        return model

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# CRP pieces


def log_eppf(counts, alpha) -> float:
    """Log probability of a partition with block sizes ``counts`` under CRP(alpha)."""
    counts = [c for c in counts if c > 0]
    n = sum(counts)
    return (len(counts) * math.log(alpha) + math.lgamma(alpha) - math.lgamma(alpha + n)
            + sum(math.lgamma(c) for c in counts))


def _normalize(logps):
    logps = np.asarray(logps, dtype=float)
    return logps - (np.logaddexp.reduce(logps) if len(logps) else 0.0)


def seat_log_probs(rest: Optional[Restaurant], key, model: TrajectoryModel, rng,
                   data: Dataset = None):
    """Normalized ``(target, log prob)`` pairs for an unseated customer.

    Targets are table ids of ``rest`` plus one :class:`NewTable`.
    """
    cfg = model.config
    data = data if data is not None else model.data.get(key)
    tables = sorted(rest.tables.values(), key=lambda t: t.id) if rest is not None else []
    alpha = rest.alpha if rest is not None else cfg.alpha
    targets, logps = [], []
    for table in tables:
        ev = model.log_evidence(data, table.composition, rng, key) if data is not None else 0.0
        targets.append(table.id)
        logps.append(math.log(table.count) + ev)
    draws = tuple(h0_sample(model.pool, rng) for _ in range(cfg.n_new_table_draws))
    if cfg.flat_evidence or data is None:
        evs = (0.0,) * len(draws)
    else:
        evs = tuple(model.prior_evidence(data, c, rng, key) for c in draws)
    targets.append(NewTable(draws, evs))
    logps.append(math.log(alpha) + logmeanexp(evs))
    return list(zip(targets, _normalize(logps).tolist()))


def _draw(logps, rng) -> int:
    p = np.exp(_normalize(logps))
    return int(rng.choice(len(p), p=p / p.sum()))


def mh_chain(comp, keys, model: TrajectoryModel, iters, rng, visit=None):
    """Metropolis-Hastings over compositions for the customers ``keys``.

    ``visit(state)`` is called after every step, e.g. to tally the chain.
    """
    pool = model.pool

    if model.config.plate_with_prior:
        def score(k, c):
            return model.prior_evidence(model.data.get(k), c, rng, k)
    else:
        def score(k, c):
            return model.customer_evidence(k, c, rng)

    def target(c):
        return h0_log_prob(c, pool) + sum(score(k, c) for k in keys)

    current = target(comp)
    for _ in range(iters):
        prop, log_fwd, log_rev = mh_propose(comp, pool, rng)
        if prop != comp:
            cand = target(prop)
            log_ratio = cand - current + log_rev - log_fwd
            if math.log(rng.random()) < log_ratio:
                comp, current = prop, cand
        if visit is not None:
            visit(comp)
    return comp


def _seat_customer(model: TrajectoryModel, key, rng):
    parent = model.parent_of(key)
    old = model.unseat(key)
    rest = model.restaurants.get(parent)
    options = seat_log_probs(rest, key, model, rng)
    choice, _ = options[_draw([lp for _, lp in options], rng)]
    if isinstance(choice, NewTable):
        w = _draw(list(choice.log_evidences), rng)
        comp = mh_chain(choice.candidates[w], [key], model, model.config.mh_iters, rng)
    else:
        comp = rest.tables[choice].composition
    model.seat(key, parent, comp)
    if comp != old:
        model.rehome_successor(key)


def plate_table(rest: Restaurant, table: Table, model: TrajectoryModel, mh_iters, rng):
    """Resample a table's composition by MH; merges into an existing twin table."""
    keys = sorted(table.customers)
    new = mh_chain(table.composition, keys, model, mh_iters, rng)
    if new == table.composition:
        return new
    twin = rest.table_for(new)
    if twin is not None:
        twin.customers.update(keys)
        for k in keys:
            model.seats[k] = (rest.parent, twin.id)
        del rest.tables[table.id]
    else:
        table.composition = new
    for k in keys:
        model.rehome_successor(k)
    return new


def initialize(model: TrajectoryModel, cohort_data, rng):
    """Seat every customer on its own table, plated from a single H0 kernel.

    The kernel is drawn proportionally to its inclusion probability and then
    refined by MH on the customer's own data, so that tables start near the
    compositions their customers support.  Customers in one restaurant that
    end on the same composition share a table.
    """
    model.data = dict(cohort_data)
    p = np.asarray(model.pool.inclusion_prob)
    for key in sorted(model.data):
        k = model.pool.kernels[int(rng.choice(len(p), p=p / p.sum()))]
        comp = mh_chain(Composition((k,)), [key], model, model.config.mh_iters, rng)
        model.seat(key, model.parent_of(key), comp)
    return model


def joint_log_likelihood(model: TrajectoryModel, rng) -> float:
    total = 0.0
    for rest in model.restaurants.values():
        total += log_eppf([t.count for t in rest.tables.values()], rest.alpha)
        for table in rest.tables.values():
            total += h0_log_prob(table.composition, model.pool)
            for key in table.customers:
                total += model.customer_evidence(key, table.composition, rng)
    return total


def gibbs_sweep(model: TrajectoryModel, rng) -> float:
    """One pass of seating, plating and hyperparameter updates.

    Returns the joint log likelihood after the pass.
    """
    for key in sorted(model.data):
        _seat_customer(model, key, rng)
    for parent in sorted(model.restaurants, key=render):
        for tid in sorted(model.restaurants.get(parent, Restaurant(parent)).tables):
            rest = model.restaurants.get(parent)
            if rest is None or tid not in rest.tables:
                continue
            plate_table(rest, rest.tables[tid], model, model.config.mh_iters, rng)
    if not model.config.flat_evidence:
        model.update_hyper_dists(rng)
    value = joint_log_likelihood(model, rng)
    model.trace.append(value)
    return value


def train(model: TrajectoryModel, cohort_data, n_sweeps, rng=None, callback=None):
    """Initialize on ``cohort_data`` (``{(m, t): Dataset}``) and run sweeps.

    ``callback(sweep_index, model)`` runs after every sweep, e.g. to
    checkpoint.  Returns the model and its per-sweep trace.
    """
    if not cohort_data:
        raise ValueError("cohort is empty")
    rng = np.random.default_rng(rng if rng is not None else model.seed)
    initialize(model, cohort_data, rng)
    if not model.config.flat_evidence:
        model.update_hyper_dists(rng)
    for i in range(n_sweeps):
        value = gibbs_sweep(model, rng)
        log.info("sweep %d: joint log likelihood %.3f, %d restaurants", i + 1, value,
                 len(model.restaurants))
        if callback is not None:
            callback(i, model)
    return model, list(model.trace)


# ---------------------------------------------------------------------------
# prediction and export


def _candidate_rng(seed, comp):
    return np.random.default_rng([int(seed), zlib.crc32(render(comp).encode())])


def predict_next(model: TrajectoryModel, prev: Composition, data: Dataset, seed=None):
    """Greedy step: the evidence-maximizing child of ``prev`` (or ``prev`` itself)."""
    if data.n < 1:
        raise ValueError("prediction needs at least one observation")
    seed = model.seed if seed is None else seed
    rest = model.restaurants.get(prev)
    cands = set() if prev.is_root else {prev}
    if rest is not None:
        cands.update(t.composition for t in rest.tables.values())
    if not cands:
        raise ValueError("model has no root restaurant; train it first")
    best, best_ev = None, -math.inf
    for comp in sorted(cands, key=render):
        ev = model.log_evidence(data, comp, _candidate_rng(seed, comp))
        if best is None or ev > best_ev:
            best, best_ev = comp, ev
    return best


def predict_trajectory(model: TrajectoryModel, batches, seed=None):
    """Compositions for ``t = 1..T`` from the cumulative data of one user."""
    prev, out = ROOT, []
    for t in range(1, len(batches) + 1):
        prev = predict_next(model, prev, Dataset.concat(batches[:t]), seed)
        out.append(prev)
    return out


def _dot_quote(text):
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(model: TrajectoryModel) -> str:
    """Transition graph; edges are labelled ``n_child/n_parent``."""
    comps = model.compositions
    ids = {c: f"n{i}" for i, c in enumerate(comps)}
    lines = ["digraph trajectory {", "  rankdir=TB;"]
    for c in comps:
        label = render(c) if not c.is_root else "root"
        lines.append(f"  {ids[c]} [label={_dot_quote(label)}];")
    for parent, child, n, total in model.transitions():
        lines.append(f"  {ids[parent]} -> {ids[child]} [label={_dot_quote(f'{n}/{total}')}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def check_invariants(model: TrajectoryModel):
    """Raise ``AssertionError`` if restaurant bookkeeping is inconsistent."""
    seen = set()
    for parent, rest in model.restaurants.items():
        assert rest.parent == parent
        comps = [t.composition for t in rest.tables.values()]
        assert len(set(comps)) == len(comps), f"duplicate table compositions under {parent}"
        for tid, table in rest.tables.items():
            assert table.customers, "empty table left behind"
            for key in table.customers:
                assert model.seats[key] == (parent, tid)
                assert key not in seen
                seen.add(key)
    assert seen == set(model.seats)
    for key in model.seats:
        assert model.seats[key][0] == model.parent_of(key), f"{key} sits in the wrong restaurant"


def structure_complexity(model: TrajectoryModel):
    """``(distinct compositions, total product terms)`` of the learned graph."""
    comps = [c for c in model.compositions if not c.is_root]
    return len(comps), sum(c.n_terms for c in comps)


def select_structure(checkpoints, top=5):
    """Simplest structure among the ``top`` checkpoints with the highest trace value.

    ``checkpoints`` is a sequence of models whose last trace entry scores
    them.  Ties on complexity go to the higher likelihood, then the later
    sweep.  ``top <= 0`` returns the final checkpoint.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if top <= 0:
        return checkpoints[-1]
    order = sorted(range(len(checkpoints)), key=lambda i: (-checkpoints[i].trace[-1], -i))
    best = order[:top]
    return checkpoints[min(best, key=lambda i: (structure_complexity(checkpoints[i]),
                                                -checkpoints[i].trace[-1], -i))]
