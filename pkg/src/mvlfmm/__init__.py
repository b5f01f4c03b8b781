"""Multivariate multilevel longitudinal functional models for gait-type curve data."""

from .basis import UnivariateBasis, bspline_basis, natural_cubic_basis, ortho_poly_basis
from .datamodel import CovariateTable, DataError, MvCurve, MvLongDataset, ObservationKey, load_dataset, save_dataset
from .lmm import CovSpec, LevelSpec, RemlOptions, ScoreLmmFit, fit_reml
from .longitudinal import LongitudinalBasis, polynomial_system, spline_system
from .model import MvLfmmFit, fit_model
from .mvfpca import MvFpcaModel, fit_mvfpca, pooled_mvfpca

__version__ = "0.1.0"

__all__ = [
    "CovSpec",
    "CovariateTable",
    "DataError",
    "LevelSpec",
    "LongitudinalBasis",
    "MvCurve",
    "MvFpcaModel",
    "MvLfmmFit",
    "MvLongDataset",
    "ObservationKey",
    "RemlOptions",
    "ScoreLmmFit",
    "UnivariateBasis",
    "bspline_basis",
    "fit_mvfpca",
    "fit_model",
    "fit_reml",
    "load_dataset",
    "natural_cubic_basis",
    "ortho_poly_basis",
    "polynomial_system",
    "pooled_mvfpca",
    "save_dataset",
    "spline_system",
]
