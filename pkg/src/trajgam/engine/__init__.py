from .assemble import AR1Spec, ModelMatrices, ModelSpecError, Penalty, ar1_transform, ar1_whiten, assemble
from .model import (
    FittedModel,
    PLSResult,
    criterion,
    fit,
    fit_at,
    optimize_lambda,
    pls_solve,
)
from .pls import FitError, PenalizedSystem, joint_diagonalize

__all__ = [
    "AR1Spec", "FitError", "FittedModel", "ModelMatrices", "ModelSpecError", "PLSResult",
    "PenalizedSystem", "Penalty", "ar1_transform", "ar1_whiten", "assemble", "criterion", "fit",
    "fit_at", "joint_diagonalize", "optimize_lambda", "pls_solve",
]
