"""Instrumental causal forests for CLATE estimation under non-compliance."""

__version__ = "0.1.0"

from .clate import (
    ClateResult,
    DrScores,
    Residuals,
    doubly_robust_scores,
    predict_clates,
    residualize,
    solve_local_2sls,
)
from .data import CausalDataset, FeatureSpec, discretize_terciles, load_csv, save_csv
from .dgp import DgpSpec, SynthDataset, generate, monte_carlo
from .forest import Forest, ForestParams, grow_forest, tune_forest_params
from .heterogeneity import blp, build_design, clan, clate_histogram
from .nuisance import NuisanceSet, fit_nuisances
from .policy import PolicyTree, learn_depth2, policy_value

__all__ = [
    "CausalDataset",
    "ClateResult",
    "DgpSpec",
    "DrScores",
    "FeatureSpec",
    "Forest",
    "ForestParams",
    "NuisanceSet",
    "PolicyTree",
    "Residuals",
    "SynthDataset",
    "blp",
    "build_design",
    "clan",
    "clate_histogram",
    "discretize_terciles",
    "doubly_robust_scores",
    "fit_nuisances",
    "generate",
    "grow_forest",
    "learn_depth2",
    "load_csv",
    "monte_carlo",
    "policy_value",
    "predict_clates",
    "residualize",
    "save_csv",
    "solve_local_2sls",
    "tune_forest_params",
    "__version__",
]
