"""Imputation and regression toolkit for sparse functional data."""

__version__ = "0.1.0"

from .errors import InsufficientData, InvalidArgument, NumericFailure, SparseFnError
from .fpca import EigenSystem, PaceOptions, fit_pace, pace_impute, pace_scores
from .forests import ForestParams, fit_forest, forest_predict, forest_weights, llf_predict
from .funcdata import (
    BinSpec,
    Grid,
    IncompleteMatrix,
    SparseCurve,
    SparseFunctionalDataset,
    align_to_grid,
    bin_matrix,
    interpolate_row,
    make_bins,
    make_grid,
)
from .impute import ImputationResult, ImputationTask, MethodSpec, impute, parse_method, pool
from .sim import MaternParams, NoiseSpec, ResponseSpec, SparsitySpec, generate, matern_cov
from .sofr import SofrOptions, fit_cam, fit_linear_sofr, fit_logistic_sofr, predict
from .splines import SplineBasis

__all__ = [
    "BinSpec",
    "EigenSystem",
    "ForestParams",
    "Grid",
    "ImputationResult",
    "ImputationTask",
    "IncompleteMatrix",
    "InsufficientData",
    "InvalidArgument",
    "MaternParams",
    "MethodSpec",
    "NoiseSpec",
    "NumericFailure",
    "PaceOptions",
    "ResponseSpec",
    "SofrOptions",
    "SparseCurve",
    "SparseFnError",
    "SparseFunctionalDataset",
    "SparsitySpec",
    "SplineBasis",
    "align_to_grid",
    "bin_matrix",
    "fit_cam",
    "fit_forest",
    "fit_linear_sofr",
    "fit_logistic_sofr",
    "fit_pace",
    "forest_predict",
    "forest_weights",
    "generate",
    "impute",
    "interpolate_row",
    "llf_predict",
    "make_bins",
    "make_grid",
    "matern_cov",
    "pace_impute",
    "pace_scores",
    "parse_method",
    "pool",
    "predict",
]
