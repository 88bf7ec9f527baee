"""Greedy compositional kernel search scored by BIC."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .gp import Dataset
from .grammar import BaseTerm, Composition, cks_neighbors, param_layout, render
from .hyper import FitFailure, HyperPrior, bic, fit_seed

__all__ = ["DepthRecord", "SearchTrace", "cks_search"]


@dataclass(frozen=True)
class DepthRecord:
    depth: int
    n_candidates: int
    best: Composition
    best_score: float


@dataclass
class SearchTrace:
    records: List[DepthRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def scores(self):
        return [r.best_score for r in self.records]


def _rank(item):
    comp, (score, _) = item
    # lower BIC first, then fewer hyperparameters, then name
    return (score, len(param_layout(comp)), render(comp))


def cks_search(data: Dataset, bases, max_depth=3, prior: HyperPrior = None, restarts=3,
               rng=None, maxfev=500):
    """Greedy search from single base kernels through one-step expansions.

    Stops after ``max_depth`` expansion rounds or when no neighbour lowers
    the BIC.  Returns ``(composition, theta, trace)``.
    """
    bases = [BaseTerm(*b) for b in bases]
    if not bases:
        raise ValueError("need at least one base kernel")
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    prior = prior if prior is not None else HyperPrior.preset("toy")
    root = int(np.random.default_rng(rng).integers(2 ** 31))
    scores = {}

    def score_all(cands):
        out = {}
        for comp in sorted(cands, key=render):
            if comp not in scores:
                try:
                    scores[comp] = bic(data, comp, prior, restarts,
                                       np.random.default_rng(fit_seed(root, data, comp)), maxfev)
                except (FitFailure, np.linalg.LinAlgError):
                    scores[comp] = (math.inf, None)
            out[comp] = scores[comp]
        return out

    trace = SearchTrace()
    layer = score_all({Composition.of(b) for b in bases})
    best, (best_score, best_theta) = min(layer.items(), key=_rank)
    if not math.isfinite(best_score):
        raise FitFailure("no base kernel could be fit")
    trace.records.append(DepthRecord(0, len(layer), best, best_score))
    for depth in range(1, max_depth + 1):
        layer = score_all(cks_neighbors(best, bases))
        if not layer:
            break
        cand, (cand_score, cand_theta) = min(layer.items(), key=_rank)
        if not cand_score < best_score:
            break
        best, best_score, best_theta = cand, cand_score, cand_theta
        trace.records.append(DepthRecord(depth, len(layer), best, best_score))
    return best, best_theta, trace
