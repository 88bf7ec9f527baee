"""Kernel trajectories: learning how GP kernel compositions evolve as data accrues."""

from .cks import cks_search
from .data import (
    Cohort,
    CohortSpec,
    User,
    gen_synthetic,
    load_csv_cohort,
    read_cohort,
    toy_spec,
    write_cohort,
)
from .estimators import CKSRegressor, CompositionalGPRegressor, TrajectoryKernelSelector
from .gp import Dataset, log_marginal_likelihood, posterior_predict
from .grammar import (
    ROOT,
    BaseTerm,
    CandidatePool,
    Composition,
    HyperParams,
    ProductTerm,
    build_pool,
    parse,
    render,
)
from .hyper import HyperDist, HyperPrior, evidence, map_fit
from .trajectory import SamplerConfig, TrajectoryModel, export_dot, predict_next, train

__all__ = [
    "BaseTerm", "ProductTerm", "Composition", "ROOT", "HyperParams", "CandidatePool",
    "parse", "render", "build_pool",
    "Dataset", "log_marginal_likelihood", "posterior_predict",
    "HyperPrior", "HyperDist", "map_fit", "evidence",
    "cks_search",
    "SamplerConfig", "TrajectoryModel", "train", "predict_next", "export_dot",
    "Cohort", "CohortSpec", "User", "toy_spec", "gen_synthetic", "write_cohort", "read_cohort",
    "load_csv_cohort",
    "CompositionalGPRegressor", "CKSRegressor", "TrajectoryKernelSelector",
]

__version__ = "0.1.0"
