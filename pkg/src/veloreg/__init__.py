"""Diffeomorphic registration with stationary velocity fields."""

from .config import DEFAULTS, RegConfig
from .continuation import ContinuationPlan, BetaSearchParams, run_plan, search_beta
from .fieldio import read_field, write_field
from .fields import Grid3, RegNorm
from .objective import RegistrationProblem, evaluate_objective, hessian_matvec, reduced_gradient
from .postprocess import deformation_map, det_deformation_gradient, overlap_scores, transport_labels
from .solver import gauss_newton_solve
from .synthetic import generate_synthetic
from .transport import solve_adjoint, solve_state, trace_characteristics

__all__ = [
    "DEFAULTS",
    "RegConfig",
    "ContinuationPlan",
    "BetaSearchParams",
    "run_plan",
    "search_beta",
    "read_field",
    "write_field",
    "Grid3",
    "RegNorm",
    "RegistrationProblem",
    "evaluate_objective",
    "hessian_matvec",
    "reduced_gradient",
    "deformation_map",
    "det_deformation_gradient",
    "overlap_scores",
    "transport_labels",
    "gauss_newton_solve",
    "generate_synthetic",
    "solve_adjoint",
    "solve_state",
    "trace_characteristics",
]
