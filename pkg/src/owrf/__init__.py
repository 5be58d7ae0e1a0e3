"""Regression random forests with tree weights chosen by Mallows-type criteria."""

from .core import (
    BootstrapSample,
    Dataset,
    DimensionError,
    Forest,
    HatMatrix,
    RegressionTree,
    aggregate_predict,
)
from .simplex import SolveReport, project_simplex, solve_quadratic_simplex
from .trees import (
    GrowConfig,
    bootstrap_sample,
    grow_cart,
    grow_forest,
    grow_sut,
    hat_matrix,
    prob_sequence_from_importance,
    sut_score,
    variable_importance,
)
from .weighting import (
    CriterionContext,
    crf_weights,
    criterion_c_dprime,
    criterion_c_prime,
    criterion_c_zero,
    solve_one_step,
    solve_two_steps,
    tpe_star,
    wrf_weights,
)

__version__ = "0.1.0"
