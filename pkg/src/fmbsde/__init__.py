"""Mean-field backward SDEs driven by fractional Brownian motion with Hurst index above 1/2."""

from .errors import (
    ConfigurationError,
    DomainError,
    FmbsdeError,
    NumericalError,
    PreconditionError,
    SingularCovarianceError,
)
from .kernel import (
    Coefficient,
    Hurst,
    KernelAccumulator,
    TimeGrid,
    cell_mass,
    inner_product,
    norm_sq,
    phi,
    ratio_bound_report,
    sigma_hat,
    sigma_tilde,
)
from .fbm import FbmPathBatch, GaussianLaw, PathSource, covariance_matrix, sample_paths, wiener_integral_samples
from .forward import ForwardSpec, eta_marginal, simulate_eta
from .pde import Driver, FrozenDriver, SpaceGrid, ValueSurface, freeze_mean_field, mean_field_expectation, solve_backward_pde
from .mfbsde import (
    MfBsdeProblem,
    MfBsdeSolution,
    apriori_check,
    compare_solutions,
    contraction_report,
    discrete_residual,
    monotone_iteration_solve,
    picard_solve,
    weighted_distance,
)
from .expr import parse_expression

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DomainError", "FmbsdeError", "NumericalError", "PreconditionError",
    "SingularCovarianceError",
    "Coefficient", "Hurst", "KernelAccumulator", "TimeGrid", "cell_mass", "inner_product", "norm_sq", "phi",
    "ratio_bound_report", "sigma_hat", "sigma_tilde",
    "FbmPathBatch", "GaussianLaw", "PathSource", "covariance_matrix", "sample_paths", "wiener_integral_samples",
    "ForwardSpec", "eta_marginal", "simulate_eta",
    "Driver", "FrozenDriver", "SpaceGrid", "ValueSurface", "freeze_mean_field", "mean_field_expectation",
    "solve_backward_pde",
    "MfBsdeProblem", "MfBsdeSolution", "apriori_check", "compare_solutions", "contraction_report",
    "discrete_residual", "monotone_iteration_solve", "picard_solve", "weighted_distance",
    "parse_expression",
]
