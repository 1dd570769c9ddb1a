"""Double machine learning with LLM-generated guesses as unpenalized nuisance predictors."""

__version__ = "0.1.0"

from dmla.data_model import (
    EstimatorConfig,
    FoldPlan,
    ObservationTable,
    make_fold_plan,
    validate_table,
)
from dmla.dml import DmlResult, compare_runs, fit_nuisances, residual_on_residual, run_dml
from dmla.lasso import DesignSpec, LassoFit, LambdaPath, fit_lasso, select_lambda_cv

__all__ = [
    "DesignSpec",
    "DmlResult",
    "EstimatorConfig",
    "FoldPlan",
    "LambdaPath",
    "LassoFit",
    "ObservationTable",
    "compare_runs",
    "fit_lasso",
    "fit_nuisances",
    "make_fold_plan",
    "residual_on_residual",
    "run_dml",
    "select_lambda_cv",
    "validate_table",
]
