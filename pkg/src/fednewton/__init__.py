"""Communication-efficient distributed Newton-type estimation for GLM federations.

The package simulates an m-center federation of GLM data, estimates the Fisher
information from cross-center M-estimators and gradients, runs Newton-like
distributed optimization against surrogate and oracle baselines, and performs
bias-adjusted one-step estimation with Gaussian confidence intervals. The
``bench`` module drives the stock simulation studies from the command line.
"""

from .model import (
    FAMILIES,
    GAUSSIAN_QUADRATIC,
    IID_EXP1,
    LOGISTIC,
    POISSON,
    STD_NORMAL,
    CenterData,
    ModelSpec,
    Sample,
    default_theta0,
    dump_federation_csv,
    generate_federation,
    generate_shared_design_federation,
    gradient,
    hessian,
    loss_value,
    quadratic_contraction,
    third_tensor,
)
from .center import (
    LocalFit,
    LocalMoments,
    NewtonSettings,
    fit_m_estimator,
    local_moments,
    mean_gradient,
    mean_hessian,
)
from .comm import (
    CommLog,
    Federation,
    FitError,
    broadcast_and_collect_gradients,
    collect_m_estimators,
    make_federation,
    pooled_oracle_fit,
)
from .fisher import (
    FisherEstimate,
    ReferenceFisher,
    SingularDesignError,
    fisher_error,
    global_hessian_estimate,
    gm_fisher_estimate,
    inverse_fisher_error,
    local_hessian_estimate,
    mg_fisher_estimate,
    reference_fisher,
    spectral_norm,
)
from .solver import (
    ConfidenceInterval,
    IterateTrace,
    OneStepResult,
    OneStepSuite,
    confidence_intervals,
    normal_quantile,
    one_step_gm,
    one_step_mg,
    one_step_suite,
    oracle_distance,
    run_csl,
    run_global_newton,
    run_gm_newton,
    run_mg_newton,
    trace_to_csv,
    one_step_to_csv,
)

__version__ = "0.1.0"
