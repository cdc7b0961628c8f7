"""Highly adaptive lasso minimum loss estimation with targeted inference.

The package fits the highly adaptive lasso (HAL), an L1-penalized
regression on a tensor-product indicator or hinge basis, selects its
penalty by cross-validation or undersmoothing, and builds estimators of
treatment-specific means on top of it: plug-in, inverse weighting,
targeted maximum likelihood (TMLE), a score-preserving TMLE variant,
collaborative TMLE and a model-fixed bootstrap.
"""
from importlib.resources import files

from .basis import BasisCatalog, BasisSpec, enumerate_basis, evaluate_basis, predict
from .bootstrap import (BootstrapReport, MeanPrediction, TreatmentMean, bootstrap_plugin, plateau_index,
                        plateau_select)
from .data import Dataset, FoldPlan, load_csv, make_folds, resample, write_csv
from .estimands import (ATE, CONTROL, TREATED, TargetReport, ate, ctmle_select, fit_outcome, fit_propensity,
                        ipw_tsm, orthogonalized_tmle_update, plugin_tsm, tmle_update_tsm)
from .scores import Direction, path_score, score_diagnostics
from .selection import CvReport, cv_path, cv_select_lambda, discrete_super_learner, undersmooth_select
from .sim import Dgp, EstimatorConfig, builtin_dgps, get_dgp, rate_experiment, run_mc
from .solver import HalFit, LassoPath, LossFamily, constrained_fit, fit_lasso, fit_path

__version__ = "0.1.0"


def sample_data_path() -> str:
    """Path of the bundled 20-row example file (columns w1, w2, a, y)."""
    return str(files(__name__).joinpath("sample_data", "sample.csv"))


__all__ = [
    "ATE", "CONTROL", "TREATED",
    "BasisCatalog", "BasisSpec", "BootstrapReport", "CvReport", "Dataset", "Dgp", "Direction",
    "EstimatorConfig", "FoldPlan", "HalFit", "LassoPath", "LossFamily", "MeanPrediction", "TargetReport",
    "TreatmentMean",
    "ate", "bootstrap_plugin", "builtin_dgps", "constrained_fit", "ctmle_select", "cv_path", "cv_select_lambda",
    "discrete_super_learner", "enumerate_basis", "evaluate_basis", "fit_lasso", "fit_outcome", "fit_path",
    "fit_propensity", "get_dgp", "ipw_tsm", "load_csv", "make_folds", "orthogonalized_tmle_update", "path_score",
    "plateau_index", "plateau_select", "plugin_tsm", "predict", "rate_experiment", "resample", "run_mc",
    "sample_data_path", "score_diagnostics", "tmle_update_tsm", "undersmooth_select", "write_csv",
]
