"""Bayesian MI-LASSO: grouped variable selection on multiply-imputed datasets."""

from .data import (
    Dataset,
    ImputedStack,
    IncompleteDataset,
    StandardizationState,
    destandardize_coefficients,
    emit_stack,
    load_stack,
    standardize,
)
from .models import ModelSpec, fit
from .sampling import ChainConfig, PosteriorDraws, rhat

__version__ = "0.1.0"

__all__ = [
    "ChainConfig",
    "Dataset",
    "ImputedStack",
    "IncompleteDataset",
    "ModelSpec",
    "PosteriorDraws",
    "StandardizationState",
    "destandardize_coefficients",
    "emit_stack",
    "fit",
    "load_stack",
    "rhat",
    "standardize",
]
