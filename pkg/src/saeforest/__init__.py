"""saeforest: small-area estimation of binary-outcome proportions with
mixed-effects random forests."""

__version__ = "0.1.0"

from .areas import (
    AreaEstimate,
    CensusFrame,
    aggregate,
    area_proportions,
    calibration_bins,
    direct_estimates,
    roc_auc,
)
from .baseline import GlmmModel, cep_area_proportions, fit_glmm_pql
from .bootstrap import BootstrapConfig, BootstrapResult, mse_parametric
from .forest import Forest, ForestConfig, TrainingSet, fit_forest, oob_predict, tune_mtry
from .gmerf import GmerfConfig, GmerfModel, fit, initialize_mu, linearize
from .mixedmodel import GroupedData, VarianceComponents, blup, estimate_sigma2, gll
from .simulation import (
    BUILTIN_SCENARIOS,
    MetricsTable,
    Scenario,
    draw_sample,
    generate_population,
    run_study,
    vpc,
)

__all__ = [
    "AreaEstimate",
    "BootstrapConfig",
    "BootstrapResult",
    "BUILTIN_SCENARIOS",
    "CensusFrame",
    "Forest",
    "ForestConfig",
    "GlmmModel",
    "GmerfConfig",
    "GmerfModel",
    "GroupedData",
    "MetricsTable",
    "Scenario",
    "TrainingSet",
    "VarianceComponents",
    "aggregate",
    "area_proportions",
    "blup",
    "calibration_bins",
    "cep_area_proportions",
    "direct_estimates",
    "draw_sample",
    "estimate_sigma2",
    "fit",
    "fit_forest",
    "fit_glmm_pql",
    "generate_population",
    "gll",
    "initialize_mu",
    "linearize",
    "mse_parametric",
    "oob_predict",
    "roc_auc",
    "run_study",
    "tune_mtry",
    "vpc",
]
