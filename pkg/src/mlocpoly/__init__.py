"""Multivariate local polynomial M-regression.

Fitting lives in localfit, loss families and error models in loss,
basis bookkeeping in polybasis, kernel moment algebra in kernels.
The dgp module simulates the designs used in the studies, bahadur
decomposes fitted gaps into leading and remainder pieces, additive
handles marginal-integration component estimation, and experiments
wires everything into reproducible Monte Carlo studies driven by
the cli module.
"""

from .polybasis import BasisLayout, build_layout, count_indices_upto
from .kernels import (
    MomentTables,
    SingularSnp,
    build_moment_tables,
    build_snp,
    make_kernel,
)
from .loss import (
    ErrorModel,
    LossModel,
    analytic_g,
    analytic_sigma2,
    centered_for,
    gaussian_error,
    huber_loss,
    log_chi_squared_error,
    lq_loss,
    quantile_loss,
    squared_loss,
    student_t_error,
)
from .localfit import (
    Dataset,
    FitConfig,
    FitFailure,
    FitResult,
    InsufficientLocalData,
    SingularDesign,
    SolverSettings,
    fit_grid,
    fit_point,
    fit_points_batched,
)
from .dgp import (
    AbsComponent,
    AdditiveFunction,
    DgpSpec,
    NonStationaryConfig,
    PolyComponent,
    SineComponent,
    simulate,
)
from .bahadur import (
    decompose,
    interior_grid,
    rate_regression,
    stochastic_term,
    sup_remainder,
    theoretical_bias,
)
from .additive import (
    AdditiveFitConfig,
    TooManyLocalFailures,
    asymptotic_bias,
    asymptotic_variance,
    estimate_component,
    marginal_integration,
)
from .experiments import DegenerateFit, ExperimentSpec, StudyAborted, run

__all__ = [
    "AbsComponent",
    "AdditiveFitConfig",
    "AdditiveFunction",
    "BasisLayout",
    "Dataset",
    "DegenerateFit",
    "DgpSpec",
    "ErrorModel",
    "ExperimentSpec",
    "FitConfig",
    "FitFailure",
    "FitResult",
    "InsufficientLocalData",
    "LossModel",
    "MomentTables",
    "NonStationaryConfig",
    "PolyComponent",
    "SineComponent",
    "SingularDesign",
    "SingularSnp",
    "SolverSettings",
    "StudyAborted",
    "TooManyLocalFailures",
    "analytic_g",
    "analytic_sigma2",
    "asymptotic_bias",
    "asymptotic_variance",
    "build_layout",
    "build_moment_tables",
    "build_snp",
    "centered_for",
    "count_indices_upto",
    "decompose",
    "estimate_component",
    "fit_grid",
    "fit_point",
    "fit_points_batched",
    "gaussian_error",
    "huber_loss",
    "interior_grid",
    "log_chi_squared_error",
    "lq_loss",
    "make_kernel",
    "marginal_integration",
    "quantile_loss",
    "rate_regression",
    "run",
    "simulate",
    "squared_loss",
    "stochastic_term",
    "student_t_error",
    "sup_remainder",
    "theoretical_bias",
]
