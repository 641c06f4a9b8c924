"""Numerical lab for jump and variation functionals of Ornstein-Uhlenbeck
semigroups driven by a non-self-adjoint stable drift.

The package is organised around the pipeline

    model -> kernels -> semigroup (quadrature + localization) -> functionals
          -> harness (experiments, reports) -> cli

Every derived quantity has at least one independent cross-check: the
semigroup can be evaluated through the smoothing kernel or through the
pushforward (random-shift) representation, kernel time-derivatives have exact
closed forms checked against finite differences, and the fast jump/variation
algorithms are validated against slow obviously-correct dynamic programs.
"""

from ._version import __version__
from .errors import (
    OuJumpError,
    ValidationError,
    NumericalError,
    NotSymmetric,
    NotPositiveDefinite,
    NotHurwitz,
    TimeNonPositive,
    BadKappa,
    NonFinite,
    SolveFailure,
    DegenerateSample,
    RegionEmpty,
    TimeOutOfRegime,
    BoxTooSmall,
    OutOfBox,
    QuadratureNonConvergent,
    EmptyCurve,
    RhoOutOfRange,
    FailureList,
)
from .model import (
    OUModel,
    CovarianceFamily,
    GaussianMeasure,
    validate_model,
    model_from_config,
    preset_standard,
    preset_rotating2d,
    matrix_exp,
    cov_qt,
    cov_qinf,
    dt_matrix,
    dtx_ratio_check,
    quadratic_R,
    gamma_density,
    gamma_logdensity,
    invariant_measure,
    mixing_time,
)
from .kernels import (
    BOUND_IDS,
    KernelEval,
    BoundFitReport,
    BoundSampleSpec,
    mehler_kernel,
    ktilde,
    n_factor,
    kernel_difference,
    dt_kernel_difference,
    kernel_time_profile,
    certify_bound,
    count_derivative_sign_changes,
)
from .semigroup import (
    QuadratureSpec,
    LocalizationScheme,
    expect_invariant,
    apply_semigroup_kernel,
    apply_semigroup_kolmogorov,
    build_localization,
    eta,
    apply_local,
    apply_global,
    delta_op,
    main_op,
    main_op_convolution,
)
from .functionals import (
    SampledCurve,
    VariationResult,
    WeakNormEstimate,
    jump_count,
    jump_count_dp,
    rho_variation,
    weak_quasinorm,
    jump_quasi_seminorm,
    weak_jump_quasi_seminorm,
    lambda_grid,
    read_curves_csv,
    write_curves_csv,
)
from .harness import (
    ExperimentConfig,
    WeakTypeReport,
    RegimeReport,
    IdentityReport,
    build_model,
    indicator_atom,
    monomial,
    run_weak_type_sweep,
    run_regime_checks,
    run_identity_suite,
    config_hash,
)

__all__ = [
    "OuJumpError", "ValidationError", "NumericalError",
    "NotSymmetric", "NotPositiveDefinite", "NotHurwitz", "TimeNonPositive",
    "BadKappa", "NonFinite", "SolveFailure", "DegenerateSample",
    "RegionEmpty", "TimeOutOfRegime", "BoxTooSmall", "OutOfBox",
    "QuadratureNonConvergent", "EmptyCurve", "RhoOutOfRange", "FailureList",
    "OUModel", "CovarianceFamily", "GaussianMeasure",
    "validate_model", "model_from_config", "preset_standard",
    "preset_rotating2d", "matrix_exp", "cov_qt", "cov_qinf", "dt_matrix",
    "dtx_ratio_check", "quadratic_R", "gamma_density", "gamma_logdensity",
    "invariant_measure", "mixing_time",
    "BOUND_IDS", "KernelEval", "BoundFitReport", "BoundSampleSpec",
    "mehler_kernel", "ktilde", "n_factor", "kernel_difference",
    "dt_kernel_difference", "kernel_time_profile", "certify_bound",
    "count_derivative_sign_changes",
    "QuadratureSpec", "LocalizationScheme", "expect_invariant",
    "apply_semigroup_kernel", "apply_semigroup_kolmogorov",
    "build_localization", "eta", "apply_local", "apply_global",
    "delta_op", "main_op", "main_op_convolution",
    "SampledCurve", "VariationResult", "WeakNormEstimate",
    "jump_count", "jump_count_dp", "rho_variation", "weak_quasinorm",
    "jump_quasi_seminorm", "weak_jump_quasi_seminorm", "lambda_grid",
    "read_curves_csv", "write_curves_csv",
    "ExperimentConfig", "WeakTypeReport", "RegimeReport", "IdentityReport",
    "build_model", "indicator_atom", "monomial",
    "run_weak_type_sweep", "run_regime_checks", "run_identity_suite",
    "config_hash",
    "__version__",
]
