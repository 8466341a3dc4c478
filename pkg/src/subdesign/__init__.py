"""Optimal unequal-probability subsampling designs for weighted M-estimation."""

from .covariance import (
    CovarianceReport,
    DispersionKind,
    GradientSet,
    dispersion_matrix,
    gamma,
    gradients_at,
    v_matrix,
)
from .criteria import (
    CoefficientSet,
    CriterionSpec,
    a_opt,
    anticipated_coefficients,
    c_opt,
    coefficients,
    d_opt,
    distance_opt,
    e_opt,
    l_opt,
    leverage,
    parse_criterion,
    phi_q,
    phi_value,
    v_opt,
)
from .evaluate import (
    EfficiencyTable,
    MonteCarloCovariance,
    Reparameterization,
    brute_force_l_optimal,
    efficiency_table,
    efficiency_table_from_gradients,
    monte_carlo_covariance,
    rel_efficiency,
    reparam_invariance,
)
from .models import (
    FitResult,
    RiskProblem,
    finpop_problem,
    fit_full,
    lognormal_problem,
    multiplier_fit,
    qblogit_problem,
    weighted_fit,
)
from .sampling import (
    DesignFamily,
    DrawResult,
    SamplingScheme,
    draw,
    uniform_scheme,
    validate_scheme,
)
from .sequential import (
    AuxConfig,
    StageRecord,
    anticipate_scheme,
    pooled_estimate,
    pooled_multipliers,
    pooled_risk,
    run_k_stages,
    stage_seed,
    update_aux,
)
from .solver import (
    SolveStatus,
    SolveTrace,
    fixed_point_solve,
    l_optimal_scheme,
    stationarity_residual,
)
from .synth import finpop_pool, lognormal_pool, make_pool, pool_problem, qblogit_pool

__version__ = "0.1.0"

__all__ = [
    "AuxConfig",
    "CoefficientSet",
    "CovarianceReport",
    "CriterionSpec",
    "DesignFamily",
    "DispersionKind",
    "DrawResult",
    "EfficiencyTable",
    "FitResult",
    "GradientSet",
    "MonteCarloCovariance",
    "Reparameterization",
    "RiskProblem",
    "SamplingScheme",
    "SolveStatus",
    "SolveTrace",
    "StageRecord",
    "a_opt",
    "anticipate_scheme",
    "anticipated_coefficients",
    "brute_force_l_optimal",
    "c_opt",
    "coefficients",
    "d_opt",
    "dispersion_matrix",
    "distance_opt",
    "draw",
    "e_opt",
    "efficiency_table",
    "efficiency_table_from_gradients",
    "finpop_pool",
    "finpop_problem",
    "fit_full",
    "fixed_point_solve",
    "gamma",
    "gradients_at",
    "l_opt",
    "l_optimal_scheme",
    "leverage",
    "lognormal_pool",
    "lognormal_problem",
    "make_pool",
    "monte_carlo_covariance",
    "multiplier_fit",
    "parse_criterion",
    "phi_q",
    "phi_value",
    "pool_problem",
    "pooled_estimate",
    "pooled_multipliers",
    "pooled_risk",
    "qblogit_pool",
    "qblogit_problem",
    "rel_efficiency",
    "reparam_invariance",
    "run_k_stages",
    "stage_seed",
    "stationarity_residual",
    "uniform_scheme",
    "update_aux",
    "v_matrix",
    "v_opt",
    "validate_scheme",
    "weighted_fit",
]
