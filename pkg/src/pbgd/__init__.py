"""Penalty-based bilevel gradient descent solvers and verification harness."""

__version__ = "0.1.0"

from .core import (
    ConstraintSet,
    DivergedError,
    InvalidConfigError,
    IterateRecord,
    MissingOracleError,
    PenaltyKind,
    ProblemSpec,
    SmoothnessConstants,
    SolveReport,
    SolverConfig,
    SubproblemBudgetError,
    Termination,
    penalized_gradient_grad_norm_sq,
    penalized_gradient_value_gap,
    penalized_objective,
    penalty_value,
    project,
    projected_gradient_metric,
)
from .inner import InnerResult, inner_iteration_schedule, lower_gd, lower_projected_gd, lower_sgd_weighted
from .problems import (
    catalog_entry,
    catalog_names,
    make_constrained_toy,
    make_example_intro,
    make_hyperclean_synthetic,
    make_problem,
    make_quadratic,
    make_toy_nc,
)
from .proxlinear import build_surrogate, pbpl, prox_gradient_mapping, solve_subproblem, surrogate_eval
from .solvers import g_pbgd, pbgd, v_pbgd, v_pbgd_constrained, v_pbsgd
from .verify import (
    CheckReport,
    check_all,
    check_danskin,
    check_squared_distance_bound,
    convergence_bound_check,
    finite_difference_grad,
    fit_loglog_slope,
)

__all__ = [name for name in dir() if not name.startswith("_")]
