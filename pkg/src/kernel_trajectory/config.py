"""Run configuration: YAML documents with nested sections, validated on load."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from importlib import resources

import yaml

from .data import CohortSpec
from .grammar import HyperParams, build_pool, parse
from .hyper import PRESETS, HyperPrior
from .trajectory import SamplerConfig

__all__ = ["RunConfig", "load_config", "builtin_config", "BUILTIN"]

BUILTIN = ("toy", "heartsteps")

_SECTIONS = ("seed", "data", "pool", "prior", "sampler", "cks", "evaluate")


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    """Parsed configuration document; ``raw`` keeps the nested mapping."""

    raw: dict

    def __post_init__(self):
        unknown = set(self.raw) - set(_SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        if not isinstance(self.raw.get("seed"), int):
            raise ValueError("config needs an explicit integer seed")
        self.pool()
        self.prior()
        self.sampler()
        for method in self.methods:
            self.method_kind(method)

    # -- sections ----------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def with_seed(self, seed):
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return RunConfig(raw)

    @property
    def data(self) -> dict:
        return self.raw.get("data", {})

    @property
    def dim(self) -> int:
        cols = self.data.get("covariate_columns")
        return len(cols) if cols else int(self.data.get("dim", 1))

    def pool(self, dim=None):
        p = self.raw.get("pool", {})
        return build_pool(dim if dim is not None else self.dim, int(p.get("max_degree", 2)),
                          p.get("preset", "toy"), tuple(p.get("extra_products", ())),
                          p.get("single_prob"), p.get("multi_prob"), p.get("overrides"))

    def prior(self) -> HyperPrior:
        p = self.raw.get("prior", {})
        base = p.get("preset", "toy")
        if base not in PRESETS:
            raise ValueError(f"unknown prior preset {base!r}")
        rows = [(role, *spec) for role, spec in sorted(p.get("roles", {}).items())]
        prior = HyperPrior.from_rows(rows, base)
        return HyperPrior(prior.roles, name=base if prior.roles == PRESETS[base] else "custom")

    def sampler(self) -> SamplerConfig:
        s = self.raw.get("sampler", {})
        return SamplerConfig(alpha=float(s.get("alpha", 1.0)),
                             n_evidence_samples=int(s.get("evidence_samples", 10)),
                             n_new_table_draws=int(s.get("new_table_draws", 5)),
                             mh_iters=int(s.get("mh_iters", 20)),
                             restarts=int(s.get("restarts", 3)),
                             maxfev=int(s.get("maxfev", 500)),
                             flat_evidence=bool(s.get("flat_evidence", False)),
                             leave_user_out=bool(s.get("leave_user_out", True)),
                             plate_with_prior=bool(s.get("plate_with_prior", True)))

    @property
    def sweeps(self) -> int:
        return int(self.raw.get("sampler", {}).get("sweeps", 50))

    @property
    def checkpoint_every(self) -> int:
        return max(1, int(self.raw.get("sampler", {}).get("checkpoint_every", 1)))

    @property
    def select_top(self) -> int:
        return int(self.raw.get("sampler", {}).get("select_top", 0))

    @property
    def cks(self) -> dict:
        c = self.raw.get("cks", {})
        return {"max_depth": int(c.get("max_depth", 3)), "restarts": int(c.get("restarts", 3)),
                "maxfev": int(c.get("maxfev", 500))}

    @property
    def methods(self):
        return list(self.raw.get("evaluate", {}).get("methods", ["trajectory"]))

    @property
    def eval_restarts(self) -> int:
        return int(self.raw.get("evaluate", {}).get("restarts", 3))

    @staticmethod
    def method_kind(method):
        """``("trajectory", None)``, ``("cks", None)`` or ``("fixed", composition)``."""
        if method in ("trajectory", "cks"):
            return method, None
        if method.startswith("fixed:"):
            return "fixed", parse(method.split(":", 1)[1])
        raise ValueError(f"unknown method {method!r}")

    # -- synthetic cohorts -------------------------------------------------

    def cohort_spec(self, split="train") -> CohortSpec:
        d = self.data
        if d.get("kind", "synthetic") != "synthetic":
            raise ValueError("cohort_spec needs a synthetic data section")
        groups = []
        for g in d[f"{split}_groups"]:
            comp = parse(g["composition"])
            groups.append((comp, HyperParams(comp, g["theta"]), int(g["users"])))
        seed = self.seed + int(d.get("test_seed_offset", 1)) * (split == "test")
        return CohortSpec(tuple(groups), tuple(d.get("batch_schedule", (3, 4, 10, 20, 50, 100))),
                          seed, self.dim, tuple(d.get("x_range", (0.0, 1.0))))


def builtin_config(name) -> RunConfig:
    if name not in BUILTIN:
        raise ValueError(f"unknown config preset {name!r}; choose from {BUILTIN}")
    text = resources.files("kernel_trajectory").joinpath("configs", f"{name}.yaml").read_text()
    return RunConfig(yaml.safe_load(text))


def load_config(path_or_name, overrides=None) -> RunConfig:
    """Load a preset name or YAML path; ``overrides`` is merged section-wise."""
    if path_or_name in BUILTIN and not os.path.exists(str(path_or_name)):
        raw = builtin_config(path_or_name).raw
    else:
        with open(path_or_name) as fh:
            raw = yaml.safe_load(fh) or {}
        base = raw.pop("extends", None)
        if base is not None:
            raw = _merge(builtin_config(base).raw, raw)
    if overrides:
        raw = _merge(raw, overrides)
    return RunConfig(raw)
