"""Kernel compositions over LIN, SE and PER base kernels.

A composition is a sum of product terms; each product term multiplies base
kernels that act on a single covariate.  Everything here is an immutable
value, so compositions can be used as dictionary keys (restaurant parents,
graph nodes, hyperparameter tables).
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "KINDS",
    "BaseTerm",
    "ProductTerm",
    "Composition",
    "ROOT",
    "ParseError",
    "canonicalize",
    "parse",
    "render",
    "param_layout",
    "HyperParams",
    "gram_batch",
    "gram_with_grads",
    "eval_gram",
    "CandidatePool",
    "build_pool",
    "h0_log_prob",
    "h0_sample",
    "cks_neighbors",
    "proposal_distribution",
    "mh_propose",
    "AdvantageKernel",
    "AdditiveKernel",
    "advantage_kernel",
]

KINDS = ("LIN", "PER", "SE")

# parameter roles attached to each base kernel, in storage order
_FACTOR_ROLES = {"LIN": ("location",), "SE": ("lengthscale",), "PER": ("lengthscale", "period")}
POSITIVE_ROLES = frozenset({"lengthscale", "period", "amplitude", "noise"})


class ParseError(ValueError):
    pass


class BaseTerm(NamedTuple):
    kind: str
    dim: int

    def __str__(self):
        return f"{self.kind}{self.dim}"


class ProductTerm(NamedTuple):
    factors: tuple

    @classmethod
    def of(cls, *factors):
        return _canonical_product(factors)

    @property
    def degree(self):
        return len(self.factors)

    def __str__(self):
        return "*".join(str(f) for f in self.factors)


def _canonical_product(factors: Iterable[BaseTerm]) -> ProductTerm:
    out = []
    seen_se = set()
    for f in sorted(BaseTerm(*f) for f in factors):
        if f.kind == "SE":
            # SE x SE on one dim is again SE (lengthscales merge)
            if f.dim in seen_se:
                continue
            seen_se.add(f.dim)
        out.append(f)
    if not out:
        raise ValueError("product term needs at least one factor")
    return ProductTerm(tuple(out))


@dataclass(frozen=True)
class Composition:
    """Sum of product terms.  The empty composition is the root marker."""

    terms: tuple = ()

    @classmethod
    def of(cls, *terms) -> "Composition":
        prods = []
        for t in terms:
            if isinstance(t, BaseTerm):
                t = (t,)
            elif isinstance(t, ProductTerm):
                t = t.factors
            prods.append(ProductTerm(tuple(BaseTerm(*f) for f in t)))
        return canonicalize(cls(tuple(prods)))

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def is_root(self) -> bool:
        return not self.terms

    @property
    def max_dim(self) -> int:
        return max((f.dim for t in self.terms for f in t.factors), default=-1)

    def __str__(self):
        return render(self)

    def __repr__(self):
        return f"Composition({render(self)!r})"

    def __lt__(self, other):
        return render(self) < render(other)


ROOT = Composition(())


def canonicalize(comp: Composition) -> Composition:
    terms = {_canonical_product(t.factors) for t in comp.terms}
    return Composition(tuple(sorted(terms)))


def render(comp: Composition) -> str:
    return " + ".join(str(t) for t in comp.terms)


_FACTOR_RE = re.compile(r"^(LIN|SE|PER)(\d+)$")


def parse(text: str) -> Composition:
    """Parse ``term ("+" term)*`` where terms join factors with ``*`` or ``×``."""
    text = text.strip()
    if not text:
        return ROOT
    terms = []
    for raw_term in text.split("+"):
        factors = []
        for raw in re.split(r"[*×]", raw_term):
            raw = raw.strip()
            m = _FACTOR_RE.match(raw)
            if m is None:
                raise ParseError(f"bad kernel factor {raw!r} in {text!r}")
            factors.append(BaseTerm(m.group(1), int(m.group(2))))
        terms.append(ProductTerm(tuple(factors)))
    return canonicalize(Composition(tuple(terms)))


# ---------------------------------------------------------------------------
# hyperparameters


def param_layout(comp) -> list:
    """List of ``(role, term_index, factor_index)`` for every parameter.

    Per term: factor parameters in factor order, then the term amplitude.
    The global noise variance comes last (indices ``-1``).
    """
    comp = getattr(comp, "composition", comp)
    layout = []
    for i, term in enumerate(comp.terms):
        for j, f in enumerate(term.factors):
            for role in _FACTOR_ROLES[f.kind]:
                layout.append((role, i, j))
        layout.append(("amplitude", i, -1))
    layout.append(("noise", -1, -1))
    return layout


@dataclass(frozen=True, eq=False)
class HyperParams:
    """Flat parameter vector tied to the composition's layout."""

    composition: Composition
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1).copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        layout = param_layout(self.composition)
        if len(values) != len(layout):
            raise ValueError(
                f"{render(self.composition)!r} takes {len(layout)} parameters, got {len(values)}"
            )
        for (role, _, _), v in zip(layout, values):
            if not np.isfinite(v) or (role in POSITIVE_ROLES and v <= 0):
                raise ValueError(f"invalid {role} value {v}")

    @classmethod
    def from_roles(cls, comp, noise=0.1, amplitude=1.0, lengthscale=1.0, period=1.0, location=0.0):
        defaults = dict(noise=noise, amplitude=amplitude, lengthscale=lengthscale,
                        period=period, location=location)
        return cls(comp, [defaults[role] for role, _, _ in param_layout(comp)])

    @property
    def noise(self) -> float:
        return float(self.values[-1])

    @property
    def roles(self):
        return [r for r, _, _ in param_layout(self.composition)]

    def __len__(self):
        return len(self.values)

    def __eq__(self, other):
        return (isinstance(other, HyperParams) and self.composition == other.composition
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"HyperParams({render(self.composition)!r}, {self.values.tolist()})"


class _Axis:
    """Per-dimension quantities shared by every factor on that dimension."""

    def __init__(self, xa, xb, same):
        self.xa, self.xb, self.same = xa, xb, same
        self._d2 = None

    @property
    def d2(self):
        if self._d2 is None:
            self._d2 = (self.xa[:, None] - self.xb[None, :]) ** 2
        return self._d2

    def phase(self, period):
        # sin/cos of pi (x - x') / p via angle differences: O(n) trig calls
        # instead of O(n^2); period has shape (S,)
        w = np.pi / period[:, None]
        a, b = w * self.xa[None, :], w * self.xb[None, :]
        sa, ca = np.sin(a), np.cos(a)
        sb, cb = (sa, ca) if self.same else (np.sin(b), np.cos(b))
        sin = sa[:, :, None] * cb[:, None, :]
        sin -= ca[:, :, None] * sb[:, None, :]
        return sin, (sa, ca, sb, cb)


def _factor(kind, params, axis, grad=False):
    """Base kernel values ``(S, n, m)`` and, optionally, d/dparam per parameter."""
    if kind == "SE":
        ell = params[:, 0][:, None, None]
        z = axis.d2[None] / ell ** 2
        g = np.exp(-0.5 * z)
        return (g, [g * z / ell]) if grad else (g, None)
    if kind == "PER":
        ell = params[:, 0][:, None, None]
        period = params[:, 1]
        sin, (sa, ca, sb, cb) = axis.phase(period)
        sin2 = sin * sin
        g = np.exp(-2.0 * sin2 / ell ** 2)
        if not grad:
            return g, None
        cos = ca[:, :, None] * cb[:, None, :] + sa[:, :, None] * sb[:, None, :]
        diff = axis.xa[:, None] - axis.xb[None, :]
        p = period[:, None, None]
        dell = g * 4.0 * sin2 / ell ** 3
        dper = g * 4.0 * sin * cos * np.pi * diff[None] / (p ** 2 * ell ** 2)
        return g, [dell, dper]
    c = params[:, 0][:, None]
    ua, ub = axis.xa[None, :] - c, axis.xb[None, :] - c
    g = ua[:, :, None] * ub[:, None, :]
    return (g, [-(ua[:, :, None] + ub[:, None, :])]) if grad else (g, None)


def _prepare(comp, values, X, X2):
    extras = ()
    if isinstance(comp, AdditiveKernel):
        comp, extras = comp.composition, comp.extras
    values = np.atleast_2d(np.asarray(values, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    same = X2 is None
    X2 = X if same else np.atleast_2d(np.asarray(X2, dtype=float))
    if comp.is_root and not extras:
        raise ValueError("the root composition has no kernel")
    if comp.max_dim >= X.shape[1] or comp.max_dim >= X2.shape[1]:
        raise IndexError(f"{render(comp)!r} uses dim {comp.max_dim}, data has {X.shape[1]}")
    n_params = len(param_layout(comp))
    if values.shape[1] != n_params:
        raise ValueError(f"{render(comp)!r} takes {n_params} parameters, got {values.shape[1]}")
    axes = {}
    for term in comp.terms:
        for f in term.factors:
            if f.dim not in axes:
                axes[f.dim] = _Axis(X[:, f.dim], X2[:, f.dim], same)
    return comp, extras, values, X, X2, same, axes


def gram_batch(comp, values, X, X2=None, add_noise=False):
    """Gram matrices for a stack of parameter vectors, shape ``(S, n, m)``."""
    comp, extras, values, X, X2, same, axes = _prepare(comp, values, X, X2)
    S, n, m = values.shape[0], X.shape[0], X2.shape[0]
    K = np.zeros((S, n, m))
    col = 0
    for term in comp.terms:
        prod = None
        for f in term.factors:
            k = len(_FACTOR_ROLES[f.kind])
            g, _ = _factor(f.kind, values[:, col:col + k], axes[f.dim])
            prod = g if prod is None else prod * g
            col += k
        prod *= values[:, col][:, None, None]
        K += prod
        col += 1
    for extra in extras:
        K += extra.gram(X, X2)[None]
    if add_noise and same:
        idx = np.arange(n)
        K[:, idx, idx] += values[:, -1][:, None]
    return K


def gram_with_grads(comp, values, X):
    """Noisy training Gram ``(n, n)`` and its derivative for every parameter.

    Derivatives are with respect to the constrained parameters, in
    :func:`param_layout` order.
    """
    comp, extras, values, X, _, _, axes = _prepare(comp, values, X, None)
    values = values[:1]
    n = X.shape[0]
    K = np.zeros((n, n))
    grads = []
    col = 0
    for term in comp.terms:
        gs, dgs = [], []
        for f in term.factors:
            k = len(_FACTOR_ROLES[f.kind])
            g, dg = _factor(f.kind, values[:, col:col + k], axes[f.dim], grad=True)
            gs.append(g[0])
            dgs.append([d[0] for d in dg])
            col += k
        amp = values[0, col]
        for i, dlist in enumerate(dgs):
            others = np.ones((n, n))
            for j, g in enumerate(gs):
                if j != i:
                    others = others * g
            grads.extend(amp * others * d for d in dlist)
        prod = gs[0]
        for g in gs[1:]:
            prod = prod * g
        grads.append(prod)
        K += amp * prod
        col += 1
    for extra in extras:
        K += extra.gram(X)
    K[np.diag_indices(n)] += values[0, -1]
    grads.append(np.eye(n))
    return K, grads


def eval_gram(comp, theta, X, X2=None, add_noise=False):
    """Gram matrix of ``comp`` under ``theta`` between rows of ``X`` and ``X2``.

    With ``X2`` omitted the matrix is square and ``add_noise`` adds the noise
    variance to its diagonal.
    """
    values = theta.values if isinstance(theta, HyperParams) else theta
    base = getattr(comp, "composition", comp)
    if isinstance(theta, HyperParams) and theta.composition != base:
        raise ValueError("hyperparameters belong to a different composition")
    return gram_batch(comp, values, X, X2, add_noise=add_noise)[0]


# ---------------------------------------------------------------------------
# candidate pools and the base distribution


@dataclass(frozen=True)
class CandidatePool:
    kernels: tuple
    inclusion_prob: tuple

    def __post_init__(self):
        kernels = tuple(_canonical_product(k.factors) for k in self.kernels)
        if len(set(kernels)) != len(kernels):
            raise ValueError("candidate pool entries must be unique")
        probs = tuple(float(p) for p in self.inclusion_prob)
        if len(probs) != len(kernels):
            raise ValueError("one inclusion probability per kernel")
        if not all(0.0 < p < 1.0 for p in probs):
            raise ValueError("inclusion probabilities must lie in (0, 1)")
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "inclusion_prob", probs)

    def __len__(self):
        return len(self.kernels)

    def index(self, term: ProductTerm) -> int:
        try:
            return self.kernels.index(term)
        except ValueError:
            raise KeyError(f"{term} is not in the candidate pool") from None

    def composition(self, mask) -> Composition:
        return Composition(tuple(sorted(k for k, keep in zip(self.kernels, mask) if keep)))


def build_pool(D, max_degree=2, preset="toy", extra_products=(), single_prob=None,
               multi_prob=None, overrides=None) -> CandidatePool:
    """Candidate product kernels and their H0 inclusion probabilities.

    ``toy`` expands every base kernel on every dim into products up to
    ``max_degree``; ``covariate_base`` uses each base kernel on each dim plus
    the explicitly listed ``extra_products``.
    """
    if max_degree < 1:
        raise ValueError("max_degree must be >= 1")
    bases = [BaseTerm(k, d) for k in KINDS for d in range(D)]
    if preset == "toy":
        single_prob = 0.1 if single_prob is None else single_prob
        multi_prob = 0.25 if multi_prob is None else multi_prob
        terms = []
        for deg in range(1, max_degree + 1):
            for combo in itertools.combinations_with_replacement(bases, deg):
                term = _canonical_product(combo)
                if term not in terms:
                    terms.append(term)
    elif preset == "covariate_base":
        single_prob = 0.03 if single_prob is None else single_prob
        multi_prob = 0.01 if multi_prob is None else multi_prob
        terms = [ProductTerm((b,)) for b in bases]
        for extra in extra_products:
            term = extra if isinstance(extra, ProductTerm) else _single_term(extra)
            if term not in terms:
                terms.append(term)
    else:
        raise ValueError(f"unknown pool preset {preset!r}")
    overrides = {(_single_term(k) if isinstance(k, str) else k): p
                 for k, p in (overrides or {}).items()}
    probs = [overrides.get(t, single_prob if t.degree == 1 else multi_prob) for t in terms]
    return CandidatePool(tuple(terms), tuple(probs))


def _single_term(text) -> ProductTerm:
    comp = parse(text) if isinstance(text, str) else text
    if comp.n_terms != 1:
        raise ParseError(f"expected a single product term, got {text!r}")
    return comp.terms[0]


def h0_log_prob(comp: Composition, pool: CandidatePool) -> float:
    """Independent-inclusion log prior, renormalized over non-empty subsets."""
    if comp.is_root:
        raise ValueError("H0 has no mass on the empty composition")
    chosen = {pool.index(t) for t in comp.terms}
    logp = 0.0
    log_empty = 0.0
    for i, p in enumerate(pool.inclusion_prob):
        logp += math.log(p) if i in chosen else math.log1p(-p)
        log_empty += math.log1p(-p)
    return logp - math.log(-math.expm1(log_empty))


def h0_sample(pool: CandidatePool, rng) -> Composition:
    probs = np.asarray(pool.inclusion_prob)
    while True:
        mask = rng.random(len(probs)) < probs
        if mask.any():
            return pool.composition(mask)


# ---------------------------------------------------------------------------
# search moves


def cks_neighbors(comp: Composition, bases: Sequence[BaseTerm]) -> set:
    """One-step expansions: add a summand, multiply into a term, swap a factor."""
    bases = [BaseTerm(*b) for b in bases]
    if not bases:
        raise ValueError("need at least one base kernel")
    terms = [t.factors for t in comp.terms]
    out = set()
    for b in bases:
        out.add(Composition.of(*terms, (b,)))
    for i, factors in enumerate(terms):
        rest = terms[:i] + terms[i + 1:]
        for b in bases:
            out.add(Composition.of(*rest, factors + (b,)))
        for j, old in enumerate(factors):
            for b in bases:
                if b != old:
                    out.add(Composition.of(*rest, factors[:j] + (b,) + factors[j + 1:]))
    out.discard(canonicalize(comp))
    return out


def _action_probs(n_k, n):
    if n_k == n and n_k <= 1:
        return 0.0, 0.0
    if n_k <= 1:
        return 1.0, 0.0
    if n_k == n:
        return 0.0, 1.0
    return 0.3, 0.7


def proposal_distribution(comp: Composition, pool: CandidatePool) -> list:
    """Every ``(proposal, log q(proposal | comp))`` reachable in one move.

    A composition with no legal move proposes itself with probability one.
    """
    n, n_k = len(pool), comp.n_terms
    if n_k > n:
        raise ValueError("composition has more terms than the pool")
    current = {pool.index(t) for t in comp.terms}
    p_add, p_remove = _action_probs(n_k, n)
    out = []
    if p_add > 0:
        for i in range(n):
            if i not in current:
                out.append((canonicalize(Composition(comp.terms + (pool.kernels[i],))),
                            math.log(p_add / (n - n_k))))
    if p_remove > 0:
        for t in comp.terms:
            out.append((Composition(tuple(x for x in comp.terms if x != t)),
                        math.log(p_remove / n_k)))
    if not out:
        out.append((comp, 0.0))
    return out


def _log_q(src: Composition, dst: Composition, pool: CandidatePool) -> float:
    n, n_k = len(pool), src.n_terms
    p_add, p_remove = _action_probs(n_k, n)
    if dst == src:
        return 0.0 if p_add == p_remove == 0.0 else -math.inf
    if dst.n_terms == n_k + 1 and p_add > 0:
        return math.log(p_add / (n - n_k))
    if dst.n_terms == n_k - 1 and p_remove > 0:
        return math.log(p_remove / n_k)
    return -math.inf


def mh_propose(comp: Composition, pool: CandidatePool, rng):
    """Add or remove one pool kernel.

    Returns ``(proposal, log_forward, log_reverse)`` for the Hastings ratio.
    """
    if comp.is_root:
        raise ValueError("cannot propose from the root composition")
    if comp.n_terms > len(pool):
        raise ValueError("composition has more terms than the pool")
    n, n_k = len(pool), comp.n_terms
    p_add, p_remove = _action_probs(n_k, n)
    if p_add == p_remove == 0.0:
        return comp, 0.0, 0.0
    if rng.random() < p_add:
        current = {pool.index(t) for t in comp.terms}
        free = [i for i in range(n) if i not in current]
        pick = free[rng.integers(len(free))]
        new = canonicalize(Composition(comp.terms + (pool.kernels[pick],)))
    else:
        drop = comp.terms[rng.integers(n_k)]
        new = Composition(tuple(t for t in comp.terms if t != drop))
    return new, _log_q(comp, new, pool), _log_q(new, comp, pool)


# ---------------------------------------------------------------------------
# reward-model advantage kernel


@dataclass(frozen=True, eq=False)
class AdvantageKernel:
    """Linear kernel ``z^T Sigma z'`` on ``z = [1, a * phi(s)]``.

    ``action_dim`` picks the action column of the input; ``feature_dims`` are
    the columns forming ``phi(s)``.
    """

    sigma: np.ndarray
    action_dim: int
    feature_dims: tuple

    def features(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        a = X[:, self.action_dim][:, None]
        return np.hstack([np.ones((len(X), 1)), a * X[:, list(self.feature_dims)]])

    def gram(self, X, X2=None):
        Z = self.features(X)
        Z2 = Z if X2 is None else self.features(X2)
        return Z @ self.sigma @ Z2.T


class AdditiveKernel(NamedTuple):
    """A composition plus fixed extra kernels, evaluable by ``eval_gram``."""

    composition: Composition
    extras: tuple = ()


def advantage_kernel(sigma, action_dim, feature_dims) -> AdvantageKernel:
    sigma = np.asarray(sigma, dtype=float)
    feature_dims = tuple(int(d) for d in feature_dims)
    if sigma.shape != (len(feature_dims) + 1,) * 2:
        raise ValueError("sigma must be (d+1) x (d+1) for d selected features")
    if not np.allclose(sigma, sigma.T) or np.linalg.eigvalsh(sigma).min() < -1e-10:
        raise ValueError("sigma must be symmetric positive semi-definite")
    return AdvantageKernel(sigma, int(action_dim), feature_dims)
