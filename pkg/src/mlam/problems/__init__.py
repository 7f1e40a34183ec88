from .gmm import (
    GMMProblem,
    MixtureParams,
    generate_flower,
    generate_gmm,
    gmm_nll,
    nll_value,
    responsibilities,
)
from .matrix_completion import MatrixCompletionProblem, generate_problem, mc_global_loss, rmse

__all__ = [
    "GMMProblem",
    "MixtureParams",
    "MatrixCompletionProblem",
    "generate_flower",
    "generate_gmm",
    "generate_problem",
    "gmm_nll",
    "mc_global_loss",
    "nll_value",
    "responsibilities",
    "rmse",
]
