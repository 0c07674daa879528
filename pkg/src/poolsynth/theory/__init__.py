from .checks import (
    CheckResult,
    balanced_mean_reduction,
    bound_terms,
    cosine_identity_check,
    cosine_identity_sweep,
    covariance_implies_variance,
    equality_case_fixture,
    gradient_bound_equality,
    gradient_bound_rank1_search,
    gradient_bound_sweep,
    gradient_statistic_bound,
    lipschitz_bound_check,
    lipschitz_sweep,
)
from .study import StudyConfig, StudyReport, bilevel_meta_loss, taylor_vs_exact_training_study
from .taylor import multi_step_residual, quadratic_scaling_check, residual_ratio, taylor_residual, toy_scaling_check
from .suite import CHECKS, run_checks, select
