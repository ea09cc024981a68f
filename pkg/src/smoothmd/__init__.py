"""Smooth minimum distance (SmoothMD) estimation for partially linear
regressions with Box-Cox transformed response.

The package covers the full pipeline: Box-Cox transform and its analytic
lambda-derivatives, product-kernel smoothing of the nuisance functions,
matrix-free discrepancy weighting, profiled generalized least squares over a
lambda grid, sandwich variance estimation, distance-metric hypothesis tests
with weighted chi-square reference laws, an NL2SLS benchmark, and a
reproducible Monte Carlo harness.
"""

from smoothmd.transform import (
    LambdaInterval,
    box_cox,
    box_cox_d1,
    box_cox_d2,
    box_cox_d3,
    inverse_box_cox,
)
from smoothmd.kernels import (
    BandwidthRule,
    Dataset,
    KernelPlan,
    build_kernel_plan,
    nw_regress,
    smooth_transform,
    xhat_matrix,
    yhat_vector,
)
from smoothmd.weights import (
    WeightConfig,
    WeightOperator,
    apply_dn,
    build_weight_operator,
    quad_form_bn,
)
from smoothmd.estimator import (
    EstimatorConfig,
    FitResult,
    fit,
    fit_with_parts,
    geometric_mean,
    profile_gls,
    profile_objective,
)
from smoothmd.inference import (
    TestResult,
    VarianceEstimate,
    dm_beta_test,
    dm_joint_test,
    dm_lambda_test,
    eiker_white_sigma,
    estimate_vcov,
    restricted_beta,
    weighted_chisq_quantile,
)
from smoothmd.nl2sls import Nl2slsConfig, nl2sls_fit
from smoothmd.simulation import DgpSpec, McReport, generate, run_monte_carlo, run_power_curve

__all__ = [
    "LambdaInterval",
    "box_cox",
    "box_cox_d1",
    "box_cox_d2",
    "box_cox_d3",
    "inverse_box_cox",
    "BandwidthRule",
    "Dataset",
    "KernelPlan",
    "build_kernel_plan",
    "nw_regress",
    "smooth_transform",
    "xhat_matrix",
    "yhat_vector",
    "WeightConfig",
    "WeightOperator",
    "apply_dn",
    "build_weight_operator",
    "quad_form_bn",
    "EstimatorConfig",
    "FitResult",
    "fit",
    "fit_with_parts",
    "geometric_mean",
    "profile_gls",
    "profile_objective",
    "TestResult",
    "VarianceEstimate",
    "dm_beta_test",
    "dm_joint_test",
    "dm_lambda_test",
    "eiker_white_sigma",
    "estimate_vcov",
    "restricted_beta",
    "weighted_chisq_quantile",
    "Nl2slsConfig",
    "nl2sls_fit",
    "DgpSpec",
    "McReport",
    "generate",
    "run_monte_carlo",
    "run_power_curve",
]

__version__ = "0.1.0"
