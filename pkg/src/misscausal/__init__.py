"""Causal effect estimation when the exposure and confounders are partially missing.

The estimators target ``E(Y^a)`` for a binary outcome and exposure under
three missingness assumptions: missing at random (multiple imputation and
complete-case baselines), missingness that may depend on the unobserved
exposure (``*_a`` estimators) and sequentially coarsened covariates
(``*_b`` estimators).
"""

from .data import (SCHEMES, ColumnRoles, DataError, ObservedDataset, apply_scheme, coarsen_monotone, collapse_block,
                   from_arrays, fully_observed, load_csv, write_csv)
from .estimators import (ESTIMATORS, CausalContrast, EstimateResult, contrast, estimate_complete_case,
                         estimate_ice_a, estimate_ice_b, estimate_ipw_a, estimate_ipw_b, estimate_tmle_a,
                         estimate_tmle_b, observed_mean, tmle_complete_data)
from .glm import GlmFit, fit_glm, fluctuate, predict
from .inference import EstimatorSpec, InferenceResult, bootstrap, if_variance, run_estimator
from .mi import ImputationConfig, impute, mi_estimate
from .nuisance import ModelSpec, NuisanceSpecs, check_positivity, fit_nuisances_mnar_a, fit_nuisances_mnar_b
from .simulate import (ScenarioSpec, SimulationReport, generate, ordering_experiment, run_study, scenario_i,
                       scenario_ii, scenario_iii, true_psi)

__version__ = "0.1.0"

__all__ = [
    "SCHEMES", "ColumnRoles", "DataError", "ObservedDataset", "apply_scheme", "coarsen_monotone",
    "collapse_block", "from_arrays", "fully_observed", "load_csv", "write_csv",
    "ESTIMATORS", "CausalContrast", "EstimateResult", "contrast", "estimate_complete_case", "estimate_ice_a",
    "estimate_ice_b", "estimate_ipw_a", "estimate_ipw_b", "estimate_tmle_a", "estimate_tmle_b",
    "observed_mean", "tmle_complete_data",
    "GlmFit", "fit_glm", "fluctuate", "predict",
    "EstimatorSpec", "InferenceResult", "bootstrap", "if_variance", "run_estimator",
    "ImputationConfig", "impute", "mi_estimate",
    "ModelSpec", "NuisanceSpecs", "check_positivity", "fit_nuisances_mnar_a", "fit_nuisances_mnar_b",
    "ScenarioSpec", "SimulationReport", "generate", "ordering_experiment", "run_study", "scenario_i",
    "scenario_ii", "scenario_iii", "true_psi",
]
